#pragma once

#include "protomsl/analytics.hpp"
#include "protomsl/calibrate.hpp"
#include "protomsl/checkpoint.hpp"
#include "protomsl/dataset.hpp"
#include "protomsl/explain.hpp"
#include "protomsl/feedback.hpp"
#include "protomsl/objectives.hpp"
#include "protomsl/protonet.hpp"
#include "protomsl/samples.hpp"
#include "protomsl/service.hpp"
#include "protomsl/toy.hpp"
#include "protomsl/trainer.hpp"
