#pragma once

// Umbrella header. Pulls in every module except the HTTP-backed pieces
// (srr/http.hpp, srr/live_search.hpp, srr/config.hpp), which are split out so
// hermetic users do not pay for the httplib include.

#include "srr/core.hpp"
#include "srr/datapipe.hpp"
#include "srr/errors.hpp"
#include "srr/evalkit.hpp"
#include "srr/gateway.hpp"
#include "srr/judge.hpp"
#include "srr/react.hpp"
#include "srr/rnr.hpp"
#include "srr/search_env.hpp"
#include "srr/serialize.hpp"
