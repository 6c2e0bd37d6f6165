#pragma once

#include "dlpo/checkpoint.hpp"
#include "dlpo/config.hpp"
#include "dlpo/engine.hpp"
#include "dlpo/error.hpp"
#include "dlpo/eval.hpp"
#include "dlpo/hash.hpp"
#include "dlpo/orchestrator.hpp"
#include "dlpo/parallel.hpp"
#include "dlpo/prompt.hpp"
#include "dlpo/report.hpp"
#include "dlpo/rng.hpp"
#include "dlpo/runlog.hpp"
#include "dlpo/synthetic.hpp"
#include "dlpo/techniques.hpp"
#include "dlpo/tgd.hpp"
