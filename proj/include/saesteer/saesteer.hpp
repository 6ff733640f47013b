#pragma once

#include "saesteer/activation_store.hpp"
#include "saesteer/bootstrap.hpp"
#include "saesteer/census.hpp"
#include "saesteer/clinical_metrics.hpp"
#include "saesteer/collect.hpp"
#include "saesteer/common.hpp"
#include "saesteer/error_types.hpp"
#include "saesteer/feature_select.hpp"
#include "saesteer/generator.hpp"
#include "saesteer/profiling.hpp"
#include "saesteer/steering.hpp"
#include "saesteer/steering_plan.hpp"
#include "saesteer/topk_sae.hpp"
#include "saesteer/toy_world.hpp"
