#pragma once

#include "attack.hpp"
#include "core.hpp"
#include "data.hpp"
#include "defense.hpp"
#include "explainer.hpp"
#include "harness/config.hpp"
#include "harness/plot.hpp"
#include "harness/sweep.hpp"
#include "model.hpp"
