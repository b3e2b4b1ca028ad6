#pragma once

#include "mvcodot/autograd.hpp"
#include "mvcodot/checkpoint.hpp"
#include "mvcodot/config.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/dot.hpp"
#include "mvcodot/errors.hpp"
#include "mvcodot/experiments.hpp"
#include "mvcodot/generator.hpp"
#include "mvcodot/metrics.hpp"
#include "mvcodot/model.hpp"
#include "mvcodot/mvco.hpp"
#include "mvcodot/nn.hpp"
#include "mvcodot/training.hpp"
#include "mvcodot/vision.hpp"
