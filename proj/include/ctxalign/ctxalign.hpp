#pragma once

#include "ctxalign/error.hpp"
#include "ctxalign/numerics.hpp"
#include "ctxalign/tsembed.hpp"
#include "ctxalign/graphspec.hpp"
#include "ctxalign/dscagnn.hpp"
#include "ctxalign/backbone.hpp"
#include "ctxalign/checkpoint.hpp"
#include "ctxalign/data.hpp"
#include "ctxalign/metrics.hpp"
#include "ctxalign/harness.hpp"
#include "ctxalign/cli.hpp"
