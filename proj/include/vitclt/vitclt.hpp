#pragma once

#include "vitclt/ablation.hpp"
#include "vitclt/activation_store.hpp"
#include "vitclt/attribution.hpp"
#include "vitclt/clt.hpp"
#include "vitclt/config.hpp"
#include "vitclt/io.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/replacement.hpp"
#include "vitclt/retrieval.hpp"
#include "vitclt/rng.hpp"
#include "vitclt/sparsifiers.hpp"
#include "vitclt/toy_vit.hpp"
#include "vitclt/trainer.hpp"
