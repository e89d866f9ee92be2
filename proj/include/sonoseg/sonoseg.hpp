#pragma once

// Umbrella header.

#include "sonoseg/augment.hpp"
#include "sonoseg/autodiff.hpp"
#include "sonoseg/crossval.hpp"
#include "sonoseg/dataset.hpp"
#include "sonoseg/errors.hpp"
#include "sonoseg/gradcheck.hpp"
#include "sonoseg/image.hpp"
#include "sonoseg/labels.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/optim.hpp"
#include "sonoseg/phantom.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"
#include "sonoseg/train.hpp"
#include "sonoseg/unet.hpp"
