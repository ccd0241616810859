#pragma once

#include "voxcut/cut_sim.hpp"
#include "voxcut/denoiser.hpp"
#include "voxcut/diffusion.hpp"
#include "voxcut/errors.hpp"
#include "voxcut/eval.hpp"
#include "voxcut/nn.hpp"
#include "voxcut/parallel.hpp"
#include "voxcut/planner.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/scene.hpp"
#include "voxcut/schedule.hpp"
#include "voxcut/voxel_grid.hpp"
#include "voxcut/vxdc.hpp"
