#pragma once

#include "coverlab/error.hpp"
#include "coverlab/tolerances.hpp"
#include "coverlab/ds_core.hpp"
#include "coverlab/estimators.hpp"
#include "coverlab/rng.hpp"
#include "coverlab/delimited.hpp"
#include "coverlab/sampling.hpp"
#include "coverlab/popsim.hpp"
#include "coverlab/matching.hpp"
#include "coverlab/harness.hpp"
