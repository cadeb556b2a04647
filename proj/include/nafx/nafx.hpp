#pragma once

#include "nafx/audio_io.hpp"
#include "nafx/checkpoint.hpp"
#include "nafx/decay.hpp"
#include "nafx/diffkit.hpp"
#include "nafx/error.hpp"
#include "nafx/loudness.hpp"
#include "nafx/mrstft.hpp"
#include "nafx/sweep.hpp"
#include "nafx/tcn.hpp"
#include "nafx/trainer.hpp"
