#pragma once

#include "autodiff.hpp"
#include "backbone.hpp"
#include "bundle.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "image.hpp"
#include "kernels.hpp"
#include "manifest.hpp"
#include "metrics.hpp"
#include "params.hpp"
#include "prompt.hpp"
#include "readout.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "scoring.hpp"
#include "synthetic.hpp"
#include "training.hpp"
