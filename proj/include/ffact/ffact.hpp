#pragma once

// Everything except the command-line front end (ffact/cli.hpp).

#include "ffact/core.hpp"
#include "ffact/tape.hpp"
#include "ffact/mlp.hpp"
#include "ffact/conv.hpp"
#include "ffact/potential_field.hpp"
#include "ffact/flow_dynamics.hpp"
#include "ffact/hj_regularizer.hpp"
#include "ffact/latent_rollout.hpp"
#include "ffact/seq_vae.hpp"
#include "ffact/ot_oracle.hpp"
#include "ffact/data_gen.hpp"
#include "ffact/evaluation.hpp"
#include "ffact/trainer.hpp"
#include "ffact/transport_demo.hpp"
