#pragma once

#include "seammil/cam_engine.hpp"
#include "seammil/checkpoint.hpp"
#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/core/params.hpp"
#include "seammil/core/random.hpp"
#include "seammil/data_pipeline.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/evaluation.hpp"
#include "seammil/gradcheck.hpp"
#include "seammil/heatmap.hpp"
#include "seammil/image_io.hpp"
#include "seammil/mil_head.hpp"
#include "seammil/nn/backbone.hpp"
#include "seammil/objective.hpp"
#include "seammil/siamese.hpp"
#include "seammil/trainer.hpp"
