#pragma once

// Umbrella header.

#include "ttdg/autodiff.hpp"
#include "ttdg/commands.hpp"
#include "ttdg/config.hpp"
#include "ttdg/datagen.hpp"
#include "ttdg/dsss.hpp"
#include "ttdg/harness.hpp"
#include "ttdg/metrics.hpp"
#include "ttdg/model.hpp"
#include "ttdg/style_bases.hpp"
#include "ttdg/style_stats.hpp"
#include "ttdg/trainer.hpp"
#include "ttdg/ttsp.hpp"
