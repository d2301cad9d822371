#pragma once

#include "hgrn/tensor.hpp"
#include "hgrn/ops.hpp"
#include "hgrn/scan.hpp"
#include "hgrn/recurrence.hpp"
#include "hgrn/config.hpp"
#include "hgrn/model.hpp"
#include "hgrn/checkpoint.hpp"
#include "hgrn/optim.hpp"
#include "hgrn/tasks.hpp"
#include "hgrn/train.hpp"
#include "hgrn/instrument.hpp"
