#pragma once

#include "ipsfuse/common.hpp"
#include "ipsfuse/rng.hpp"
#include "ipsfuse/parallel.hpp"
#include "ipsfuse/tensor.hpp"
#include "ipsfuse/image.hpp"
#include "ipsfuse/pnm.hpp"
#include "ipsfuse/shuffle.hpp"
#include "ipsfuse/ssm.hpp"
#include "ipsfuse/model.hpp"
#include "ipsfuse/checkpoint.hpp"
#include "ipsfuse/trainer.hpp"
#include "ipsfuse/metrics.hpp"
#include "ipsfuse/selftest.hpp"
