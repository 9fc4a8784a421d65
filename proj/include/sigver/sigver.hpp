#pragma once

#include "sigver/error.hpp"
#include "sigver/rng.hpp"
#include "sigver/image.hpp"
#include "sigver/image_io.hpp"
#include "sigver/preproc.hpp"
#include "sigver/tensor.hpp"
#include "sigver/layers.hpp"
#include "sigver/optim.hpp"
#include "sigver/netspec.hpp"
#include "sigver/network.hpp"
#include "sigver/model_io.hpp"
#include "sigver/svm.hpp"
#include "sigver/metrics.hpp"
#include "sigver/embedview.hpp"
#include "sigver/corpus.hpp"
#include "sigver/pipeline.hpp"
