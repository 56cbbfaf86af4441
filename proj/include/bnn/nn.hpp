#pragma once

#include "bnn/nn/layers.hpp"
#include "bnn/nn/ops.hpp"
