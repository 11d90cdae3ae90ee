#pragma once

#include "ntku/error.hpp"
#include "ntku/rng.hpp"
#include "ntku/numerics.hpp"
#include "ntku/params.hpp"
#include "ntku/models.hpp"
#include "ntku/checkpoint.hpp"
#include "ntku/dataset.hpp"
#include "ntku/ntk.hpp"
#include "ntku/scrub.hpp"
#include "ntku/metrics.hpp"
#include "ntku/trainer.hpp"
#include "ntku/experiment.hpp"
