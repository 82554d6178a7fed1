#pragma once

#include "httplib.h"
#include "rctkg/service.hpp"

namespace rctkg {

/// Installs the trial API routes (and optional auth / static mount) on `server`.
void register_routes(httplib::Server& server, TrialService& service, const HttpOptions& opts);

}  // namespace rctkg
