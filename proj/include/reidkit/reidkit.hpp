#pragma once

#include "reidkit/tensor.hpp"
#include "reidkit/numerics.hpp"
#include "reidkit/gradcheck.hpp"
#include "reidkit/attention.hpp"
#include "reidkit/architecture.hpp"
#include "reidkit/alignment.hpp"
#include "reidkit/training.hpp"
#include "reidkit/retrieval.hpp"
#include "reidkit/synthetic.hpp"
#include "reidkit/io.hpp"
#include "reidkit/gradsuite.hpp"
#include "reidkit/pipeline.hpp"
