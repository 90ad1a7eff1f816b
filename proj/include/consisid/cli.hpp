#pragma once

namespace csid::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitDiverged = 3;

// consisid <gen-data|train-towers|train|sample|evaluate|ablate-injection|
//           ablate-steps|spectrum|curate> [--config PATH] [--set k=v]... [--out DIR] [--seed N]
int run_cli(int argc, char** argv);

}  // namespace csid::cli
