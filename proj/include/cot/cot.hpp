#pragma once

// Everything except the CLI front end, which pulls in the vendored headers.

#include "cot/config.hpp"
#include "cot/datagen.hpp"
#include "cot/dataset.hpp"
#include "cot/errors.hpp"
#include "cot/eval.hpp"
#include "cot/gradcheck.hpp"
#include "cot/losses.hpp"
#include "cot/mixup.hpp"
#include "cot/models.hpp"
#include "cot/ops.hpp"
#include "cot/optim.hpp"
#include "cot/ot.hpp"
#include "cot/parallel.hpp"
#include "cot/pointcloud.hpp"
#include "cot/renderer.hpp"
#include "cot/rng.hpp"
#include "cot/tensor.hpp"
#include "cot/trainer.hpp"
