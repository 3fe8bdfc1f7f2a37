#pragma once

#include "detrig/attack.hpp"
#include "detrig/inversion.hpp"
#include "detrig/jsonl.hpp"
#include "detrig/metrics.hpp"
#include "detrig/model.hpp"
#include "detrig/pipeline.hpp"
#include "detrig/rng.hpp"
#include "detrig/sensitivity.hpp"
#include "detrig/tensor.hpp"
#include "detrig/toycode.hpp"
#include "detrig/unlearn.hpp"
#include "detrig/vocab.hpp"
