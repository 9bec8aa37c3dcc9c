#pragma once

#include "showcase/diff/adamw.hpp"
#include "showcase/diff/graph.hpp"
#include "showcase/diff/ops.hpp"
#include "showcase/diff/tensor.hpp"
