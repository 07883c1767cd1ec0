#pragma once

#include "nullfuse/analysis.hpp"
#include "nullfuse/bench.hpp"
#include "nullfuse/error.hpp"
#include "nullfuse/float16.hpp"
#include "nullfuse/fusion.hpp"
#include "nullfuse/linalg.hpp"
#include "nullfuse/lora_io.hpp"
#include "nullfuse/projector.hpp"
#include "nullfuse/random.hpp"
#include "nullfuse/report.hpp"
#include "nullfuse/safetensors.hpp"
#include "nullfuse/verify.hpp"
#include "nullfuse/version.hpp"
