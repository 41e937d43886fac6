#include <fstream>

#include "eapgp/attribution.hpp"
#include "eapgp/graph.hpp"

namespace eapgp {

void save_scores_csv(const Graph& graph, const EdgeScores& scores, const std::string& path) {
  if (static_cast<int64_t>(scores.score.size()) != graph.num_edges())
    fail_invalid("save_scores_csv: ", scores.score.size(), " scores for ", graph.num_edges(),
                 " edges");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << "edge_index,src,dst,channel,score\n";
  for (int64_t e = 0; e < graph.num_edges(); ++e) {
    const Edge& edge = graph.edges()[static_cast<size_t>(e)];
    out << e << ',' << node_name(graph.nodes()[static_cast<size_t>(edge.src)]) << ','
        << node_name(graph.nodes()[static_cast<size_t>(edge.dst)]) << ','
        << channel_name(edge.channel) << ','
        << format_double(scores.score[static_cast<size_t>(e)]) << '\n';
  }
}

void save_saturation_csv(const SaturationProfile& profile, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  const bool gradpath = !profile.step_w.empty();
  const double residual = profile.endpoint_residual.empty()
                              ? 0.0
                              : mean_of(profile.endpoint_residual);
  out << "step,channel,grad_norm,w,endpoint_residual\n";
  for (size_t step = 0; step < profile.norms.size(); ++step) {
    for (size_t c = 0; c < profile.channel_labels.size(); ++c) {
      out << step << ',' << profile.channel_labels[c] << ','
          << format_double(profile.norms[step][c]) << ',';
      if (gradpath)
        out << format_double(profile.step_w[step]) << ',' << format_double(residual);
      else
        out << ',';
      out << '\n';
    }
  }
}

}  // namespace eapgp
