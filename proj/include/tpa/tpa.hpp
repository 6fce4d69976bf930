#pragma once

#include "tpa/commands.hpp"
#include "tpa/config.hpp"
#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/geometry.hpp"
#include "tpa/image.hpp"
#include "tpa/losses.hpp"
#include "tpa/nn.hpp"
#include "tpa/optimizer.hpp"
#include "tpa/plot.hpp"
#include "tpa/png_io.hpp"
#include "tpa/report_io.hpp"
#include "tpa/scene_data.hpp"
#include "tpa/segmentation.hpp"
#include "tpa/selection.hpp"
#include "tpa/training.hpp"
