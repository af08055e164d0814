#pragma once

#include "cgs/core.hpp"
#include "cgs/rasterizer.hpp"
#include "cgs/metrics.hpp"
#include "cgs/synth.hpp"
#include "cgs/trainer.hpp"
#include "cgs/io.hpp"
