#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amc/tensor.hpp"

namespace amc::gradcheck {

struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct Report {
    std::vector<Entry> entries;
    bool all_pass = true;
    void add(std::string name, double err, double tol);
    std::string summary() const; // one line per entry
};

// Central-difference comparison for a freshly rebuilt scalar. The oracle
// side only runs forward passes. Coordinates are deterministically
// sampled per leaf (all of them when a leaf has <= max_coords entries).
struct FdOptions {
    double h = 1e-5;
    std::size_t max_coords = 4;
    std::uint64_t coord_seed = 0;
    bool allow_unused = false;
};

double fd_max_rel_err(const std::function<Tensor()>& build, std::vector<Tensor> leaves,
                      const FdOptions& opts = {});

// Per-op sweeps over random shapes; tolerance 1e-5.
Report check_ops(std::uint64_t seed_base, std::size_t seeds);
// Whole micro model (ITM+MLM+ITC composed), sampled coordinates; 1e-4.
Report check_model(std::uint64_t seed_base, std::size_t seeds);
// Double backward of the margin losses through the GradCAM trace; 1e-3.
Report check_amc(std::uint64_t seed_base, std::size_t seeds);

} // namespace amc::gradcheck
