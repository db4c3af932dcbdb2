#pragma once

#include "avfusion/asr_stub.hpp"
#include "avfusion/audio.hpp"
#include "avfusion/blas.hpp"
#include "avfusion/checkpoint.hpp"
#include "avfusion/config.hpp"
#include "avfusion/evaluator.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/manifest.hpp"
#include "avfusion/nn.hpp"
#include "avfusion/rng.hpp"
#include "avfusion/synth.hpp"
#include "avfusion/tensor.hpp"
#include "avfusion/trainer.hpp"
#include "avfusion/util.hpp"
#include "avfusion/visual.hpp"
#include "avfusion/experiment.hpp"
