#include <fstream>

#include <json.hpp>

#include "eapgp/evaluation.hpp"

namespace eapgp {

void save_sweep_csv(const std::vector<FaithfulnessReport>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << "sparsity,n_selected,n_after_prune,method,k,delta_plus,delta_minus,delta_c,nfs,"
         "wall_time_s\n";
  for (const FaithfulnessReport& r : rows) {
    out << format_double(r.sparsity) << ',' << r.n_selected << ',' << r.n_after_prune << ','
        << r.method << ',' << r.k << ',' << format_double(r.delta_plus) << ','
        << format_double(r.delta_minus) << ',' << format_double(r.delta_c) << ','
        << format_double(r.nfs) << ',' << format_double(r.wall_time_s) << '\n';
  }
}

void save_report_json(const FaithfulnessReport& report, const std::string& path) {
  nlohmann::ordered_json j;
  j["method"] = report.method;
  j["k"] = report.k;
  j["n_selected"] = report.n_selected;
  j["n_after_prune"] = report.n_after_prune;
  j["sparsity"] = report.sparsity;
  j["delta_plus"] = report.delta_plus;
  j["delta_minus"] = report.delta_minus;
  j["delta_c"] = report.delta_c;
  j["nfs"] = report.nfs;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << j.dump(2) << "\n";
}

void save_timing_sidecar(double wall_time_s, const std::string& path) {
  nlohmann::ordered_json j;
  j["wall_time_s"] = wall_time_s;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << j.dump(2) << "\n";
}

}  // namespace eapgp
