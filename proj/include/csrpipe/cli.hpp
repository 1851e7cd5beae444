#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "csrpipe/config.hpp"

namespace csrpipe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitStageFailure = 1;
inline constexpr int kExitConfigError = 2;

struct CliHooks {
  // Called once the runtime is wired, before any request is sent.
  std::function<void(Runtime&)> on_runtime;
  std::ostream* out = nullptr;  // defaults to std::cout
  std::ostream* err = nullptr;  // defaults to std::cerr
};

/// Entry point behind the `csrpipe` binary. `args` excludes the program
/// name. Returns 0 on success, 1 on stage failure, 2 on config error.
int run_cli(const std::vector<std::string>& args, const CliHooks& hooks = {});

/// Backend requests a command would issue for `records` inputs, per
/// endpoint, ignoring retries and re-asks.
std::map<std::string, std::size_t> planned_requests(const EngineConfig& config,
                                                    const std::string& command, Stage stage,
                                                    std::size_t records,
                                                    std::size_t with_reference);

}  // namespace csrpipe
