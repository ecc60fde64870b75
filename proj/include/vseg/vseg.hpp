#pragma once

// Umbrella header for the whole library.

#include "vseg/checkpoint.hpp"
#include "vseg/discrete_elbo.hpp"
#include "vseg/errors.hpp"
#include "vseg/gradcheck.hpp"
#include "vseg/inference.hpp"
#include "vseg/networks.hpp"
#include "vseg/objective.hpp"
#include "vseg/optimizer.hpp"
#include "vseg/random.hpp"
#include "vseg/run_config.hpp"
#include "vseg/synthetic.hpp"
#include "vseg/tape.hpp"
#include "vseg/tensor.hpp"
#include "vseg/tensor_io.hpp"
#include "vseg/trainer.hpp"
