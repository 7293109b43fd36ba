#pragma once

#include "mpg/ad.hpp"
#include "mpg/discrete.hpp"
#include "mpg/economy.hpp"
#include "mpg/experiment.hpp"
#include "mpg/game.hpp"
#include "mpg/metrics.hpp"
#include "mpg/network.hpp"
#include "mpg/numeric.hpp"
#include "mpg/policies.hpp"
#include "mpg/rollout.hpp"
#include "mpg/solver.hpp"
