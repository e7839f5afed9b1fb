#pragma once

#include "tc3dgs/bitio.hpp"
#include "tc3dgs/container.hpp"
#include "tc3dgs/core.hpp"
#include "tc3dgs/error.hpp"
#include "tc3dgs/keypoints.hpp"
#include "tc3dgs/masking.hpp"
#include "tc3dgs/pipeline.hpp"
#include "tc3dgs/quant.hpp"
#include "tc3dgs/renderer.hpp"
