// Trains the Emb-MLP on the C = 1 task with and without identity examples and prints
// OOD accuracy, the worst OOD margin and the template flags of each run.

#include "twohop/analysis.hpp"
#include "twohop/embmlp.hpp"
#include "twohop/taskgen.hpp"

#include <cstdio>
#include <cstdlib>

using namespace twohop;

int main(int argc, char** argv) {
  const int n = argc > 1 ? std::atoi(argv[1]) : 20;
  for (bool identity : {true, false}) {
    taskgen::DatasetSpec spec;
    spec.n_entities = n;
    spec.complexity = 1;
    spec.include_identity = identity;
    const auto ds = taskgen::generate(spec);
    const auto run = embmlp::train(ds, embmlp::TrainConfig{});
    const auto reports = embmlp::ood_reports(run.params, ds);
    const auto flags = analysis::template_pattern_check(embmlp::logit_matrix(run.params), ds.layout);
    std::printf("%-12s steps=%-6ld train=%.2f ood=%.2f min_q=%+.3f self_peak=%d/%d subject_bias=%d/%d\n",
                identity ? "identity" : "no identity", run.steps, run.trace.back().train_acc, accuracy(reports),
                min_margin(reports), flags.self_peak_count, flags.bridge_count, flags.subject_biased_count,
                flags.subject_count);
  }
}
