#pragma once

#include "lcrp/builder.hpp"
#include "lcrp/canonize.hpp"
#include "lcrp/concept_viz.hpp"
#include "lcrp/context.hpp"
#include "lcrp/errors.hpp"
#include "lcrp/eval.hpp"
#include "lcrp/fixtures.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/gradient.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/heads.hpp"
#include "lcrp/io.hpp"
#include "lcrp/items.hpp"
#include "lcrp/relprop.hpp"
#include "lcrp/tensor.hpp"
