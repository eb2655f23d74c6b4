#pragma once

#include "motionmae/autodiff.hpp"
#include "motionmae/checkpoint.hpp"
#include "motionmae/error.hpp"
#include "motionmae/evalviz.hpp"
#include "motionmae/gradcheck.hpp"
#include "motionmae/model.hpp"
#include "motionmae/optim.hpp"
#include "motionmae/rng.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tensor.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/training.hpp"
#include "motionmae/video.hpp"
