#ifndef DEEPSRQ_DEEPSRQ_HPP
#define DEEPSRQ_DEEPSRQ_HPP

#include "deepsrq/checkpoint.hpp"
#include "deepsrq/config.hpp"
#include "deepsrq/decomp.hpp"
#include "deepsrq/eval.hpp"
#include "deepsrq/imgio.hpp"
#include "deepsrq/layers.hpp"
#include "deepsrq/model.hpp"
#include "deepsrq/network.hpp"
#include "deepsrq/optim.hpp"
#include "deepsrq/patching.hpp"
#include "deepsrq/rng.hpp"
#include "deepsrq/tensor.hpp"
#include "deepsrq/trainer.hpp"

#endif  // DEEPSRQ_DEEPSRQ_HPP
