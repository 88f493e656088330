#ifndef CELLTOSG_CELLTOSG_HPP
#define CELLTOSG_CELLTOSG_HPP

#include "common.hpp"
#include "csv.hpp"
#include "fm_model.hpp"
#include "graph_builder.hpp"
#include "inference.hpp"
#include "nn.hpp"
#include "npy.hpp"
#include "preprocess.hpp"
#include "retrieval.hpp"
#include "shard_store.hpp"
#include "stats.hpp"

#endif
