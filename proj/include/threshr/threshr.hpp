#pragma once

// umbrella header

#include "threshr/errors.hpp"
#include "threshr/stats.hpp"
#include "threshr/regress.hpp"
#include "threshr/dataset.hpp"
#include "threshr/nuisance.hpp"
#include "threshr/estimators.hpp"
#include "threshr/inference.hpp"
#include "threshr/sims.hpp"
