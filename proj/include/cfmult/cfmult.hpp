#pragma once

#include "cfmult/analytics.hpp"
#include "cfmult/common.hpp"
#include "cfmult/costs.hpp"
#include "cfmult/engines.hpp"
#include "cfmult/experiments.hpp"
#include "cfmult/generative.hpp"
#include "cfmult/models.hpp"
#include "cfmult/service.hpp"
#include "cfmult/tabular.hpp"
