#pragma once

#include "curvalid/analysis.hpp"
#include "curvalid/corpus.hpp"
#include "curvalid/detector.hpp"
#include "curvalid/error.hpp"
#include "curvalid/geometry.hpp"
#include "curvalid/lof.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/model_io.hpp"
#include "curvalid/nn/extractor.hpp"
#include "curvalid/nn/gradcheck.hpp"
#include "curvalid/nn/layers.hpp"
#include "curvalid/nn/mlp.hpp"
#include "curvalid/parallel.hpp"
#include "curvalid/pipeline.hpp"
#include "curvalid/random.hpp"
#include "curvalid/synth.hpp"
#include "curvalid/verify.hpp"
