#pragma once

#include "wsdet/dataset.hpp"
#include "wsdet/detection.hpp"
#include "wsdet/ema.hpp"
#include "wsdet/error.hpp"
#include "wsdet/feature_grid.hpp"
#include "wsdet/fusion.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/grid_io.hpp"
#include "wsdet/heatmap.hpp"
#include "wsdet/io.hpp"
#include "wsdet/metrics.hpp"
#include "wsdet/random.hpp"
#include "wsdet/toydet.hpp"
#include "wsdet/train.hpp"
