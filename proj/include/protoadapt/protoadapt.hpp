#pragma once

#include "protoadapt/numcore.hpp"
#include "protoadapt/transformer.hpp"
#include "protoadapt/prototype.hpp"
#include "protoadapt/detector.hpp"
#include "protoadapt/synthbench.hpp"
#include "protoadapt/pipeline.hpp"
