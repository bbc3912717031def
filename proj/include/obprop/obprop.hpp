#pragma once

// Umbrella header.

#include "baselines.hpp"
#include "container.hpp"
#include "corpus.hpp"
#include "generators.hpp"
#include "geometry.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "observable.hpp"
#include "parallel.hpp"
#include "patching.hpp"
#include "path.hpp"
#include "propagate.hpp"
#include "rng.hpp"
#include "validate.hpp"
