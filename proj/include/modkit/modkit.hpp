#pragma once

#include "modkit/converter.hpp"
#include "modkit/dataset.hpp"
#include "modkit/design.hpp"
#include "modkit/error.hpp"
#include "modkit/lngru.hpp"
#include "modkit/metrics.hpp"
#include "modkit/optimizer.hpp"
#include "modkit/pipeline.hpp"
#include "modkit/simulator.hpp"
#include "modkit/surrogate.hpp"
