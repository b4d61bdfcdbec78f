#pragma once

#include "xutt/bench.hpp"
#include "xutt/ctc_decoder.hpp"
#include "xutt/error.hpp"
#include "xutt/evalkit.hpp"
#include "xutt/fixture.hpp"
#include "xutt/io.hpp"
#include "xutt/model.hpp"
#include "xutt/parallel.hpp"
#include "xutt/pipeline.hpp"
#include "xutt/random.hpp"
#include "xutt/rescorer.hpp"
#include "xutt/session.hpp"
#include "xutt/tensor.hpp"
#include "xutt/tuner.hpp"
#include "xutt/vocab.hpp"
