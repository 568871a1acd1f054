#pragma once

#include <cstdint>
#include <string>

namespace flowcast::cli {

/// Raw command-line state; -1 / empty string means "not given" so config-file
/// values and defaults can fill the gaps.
struct Options {
    std::string command;

    std::string data;
    std::string model; // architecture name (train/ablate/compare/sweep) or checkpoint path (evaluate/attention)
    std::string out;
    std::string config;
    std::string ratios;     // "train,val,test"
    std::string split;      // dataset part for evaluate/attention
    std::uint64_t seed = 0;
    bool seed_set = false;
    long long epochs = -1;
    long long batch = -1;
    long long window = -1;
    long long heads = -1;
    long long dmodel = -1;
    long long layers = -1;
    long long patience = -1;
    long long sample_index = -1;
    long long days = -1;
    double lr = -1.0;
    bool lr_set = false;
};

/// Executes the selected subcommand; throws flowcast errors on failure.
void run(const Options& options);

} // namespace flowcast::cli
