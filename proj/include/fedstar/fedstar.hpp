#pragma once

#include "fedstar/data.hpp"
#include "fedstar/error.hpp"
#include "fedstar/experiment.hpp"
#include "fedstar/federation.hpp"
#include "fedstar/matrix.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/params_io.hpp"
#include "fedstar/pretrain.hpp"
#include "fedstar/seed.hpp"
#include "fedstar/selftrain.hpp"
