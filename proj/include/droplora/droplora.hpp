#pragma once

#include "droplora/adapters.hpp"
#include "droplora/checkpoint.hpp"
#include "droplora/csv.hpp"
#include "droplora/errors.hpp"
#include "droplora/experiments.hpp"
#include "droplora/linalg.hpp"
#include "droplora/nets.hpp"
#include "droplora/rng.hpp"
#include "droplora/run_config.hpp"
#include "droplora/session.hpp"
#include "droplora/tensor.hpp"
#include "droplora/training.hpp"
