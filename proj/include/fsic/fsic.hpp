#pragma once

#include "fsic/autodiff.hpp"
#include "fsic/checkpoint.hpp"
#include "fsic/datamodel.hpp"
#include "fsic/encoder.hpp"
#include "fsic/episodes.hpp"
#include "fsic/harness.hpp"
#include "fsic/inference.hpp"
#include "fsic/rng.hpp"
#include "fsic/scoring.hpp"
#include "fsic/selftest.hpp"
#include "fsic/synthetic.hpp"
#include "fsic/training.hpp"
