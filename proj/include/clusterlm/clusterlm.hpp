#pragma once

#include "clustering.hpp"
#include "corpus.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "pipeline.hpp"
#include "retrieval.hpp"
#include "trainer.hpp"
#include "util.hpp"
