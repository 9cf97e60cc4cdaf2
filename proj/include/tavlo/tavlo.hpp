#pragma once

#include "tavlo/ast_attention.hpp"
#include "tavlo/autograd.hpp"
#include "tavlo/config.hpp"
#include "tavlo/dataset.hpp"
#include "tavlo/encoders.hpp"
#include "tavlo/error.hpp"
#include "tavlo/evaluation.hpp"
#include "tavlo/formats.hpp"
#include "tavlo/harness.hpp"
#include "tavlo/media_ingest.hpp"
#include "tavlo/model.hpp"
#include "tavlo/nn.hpp"
#include "tavlo/objective.hpp"
#include "tavlo/synthetic.hpp"
#include "tavlo/tensor.hpp"
#include "tavlo/tensor_io.hpp"
