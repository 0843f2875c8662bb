#pragma once

#include "bdlab/common.hpp"
#include "bdlab/defense_kit.hpp"
#include "bdlab/image.hpp"
#include "bdlab/kd_trainer.hpp"
#include "bdlab/harness_config.hpp"
#include "bdlab/harness.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/poison_pipeline.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/sim_vlm.hpp"
#include "bdlab/text_core.hpp"
#include "bdlab/tiny_vlm.hpp"
