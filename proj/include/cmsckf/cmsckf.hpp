#pragma once

#include "cmsckf/accumulator.hpp"
#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"
#include "cmsckf/harness.hpp"
#include "cmsckf/propagation.hpp"
#include "cmsckf/report_io.hpp"
#include "cmsckf/scaling.hpp"
#include "cmsckf/scenario.hpp"
#include "cmsckf/simulator.hpp"
#include "cmsckf/state.hpp"
#include "cmsckf/updates.hpp"
#include "cmsckf/vision.hpp"
