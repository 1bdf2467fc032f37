#pragma once

#include "dualdyn/tensor.hpp"
#include "dualdyn/graph.hpp"
#include "dualdyn/ops.hpp"
#include "dualdyn/gradcheck.hpp"
#include "dualdyn/params.hpp"
#include "dualdyn/optim.hpp"
#include "dualdyn/spline.hpp"
#include "dualdyn/solvers.hpp"
#include "dualdyn/flows.hpp"
#include "dualdyn/data.hpp"
#include "dualdyn/model.hpp"
#include "dualdyn/harness.hpp"
#include "dualdyn/verify.hpp"
