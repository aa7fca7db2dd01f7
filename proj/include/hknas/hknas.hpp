#pragma once

#include "hknas/architecture.hpp"
#include "hknas/checkpoint.hpp"
#include "hknas/conv.hpp"
#include "hknas/data.hpp"
#include "hknas/errors.hpp"
#include "hknas/hyperkernel.hpp"
#include "hknas/metrics.hpp"
#include "hknas/mixedop.hpp"
#include "hknas/network.hpp"
#include "hknas/ops.hpp"
#include "hknas/optim.hpp"
#include "hknas/tensor.hpp"
#include "hknas/workflow.hpp"
