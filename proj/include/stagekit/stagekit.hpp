#pragma once

#include "stagekit/core.hpp"
#include "stagekit/digest.hpp"
#include "stagekit/ensemble.hpp"
#include "stagekit/error.hpp"
#include "stagekit/io.hpp"
#include "stagekit/metrics.hpp"
#include "stagekit/pipeline.hpp"
#include "stagekit/swa.hpp"
#include "stagekit/tta.hpp"
