#pragma once

#include "attribute_model.hpp"
#include "digest.hpp"
#include "error.hpp"
#include "image.hpp"
#include "model_gateway.hpp"
#include "orchestrator.hpp"
#include "prompt_forge.hpp"
#include "reid_eval.hpp"
#include "semantic_metric.hpp"
#include "tv_denoise.hpp"
