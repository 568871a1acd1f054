#include "commands.hpp"

#include "flowcast/errors.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

void add_common_flags(CLI::App* cmd, flowcast::cli::Options& o, bool& seed_seen, bool& lr_seen) {
    cmd->add_option("--data", o.data, "Input inflow CSV (timestamp,subway,taxi,bus)");
    cmd->add_option("--out", o.out, "Output directory (or file for synth)");
    cmd->add_option("--config", o.config, "key=value config file; explicit flags win");
    cmd->add_option("--seed", o.seed, "PRNG seed (default: $FLOWCAST_SEED or 42)")
        ->each([&seed_seen](const std::string&) { seed_seen = true; });
    cmd->add_option("--epochs", o.epochs, "Training epochs");
    cmd->add_option("--batch", o.batch, "Mini-batch size");
    cmd->add_option("--window", o.window, "History window length L (1-35)");
    cmd->add_option("--heads", o.heads, "Attention heads m");
    cmd->add_option("--dmodel", o.dmodel, "Shared projection width d");
    cmd->add_option("--layers", o.layers, "Encoder layer count N");
    cmd->add_option("--lr", o.lr, "Learning rate")->each([&lr_seen](const std::string&) {
        lr_seen = true;
    });
    cmd->add_option("--patience", o.patience, "Early-stop patience in epochs (0 disables)");
    cmd->add_option("--ratios", o.ratios, "Chronological split ratios, e.g. 0.7,0.1,0.2");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowcast: multitask short-term inflow prediction for subway, taxi, and bus"};
    app.require_subcommand(1);

    flowcast::cli::Options o;
    bool seed_seen = false;
    bool lr_seen = false;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic weekday inflow CSV");
    synth->add_option("--days", o.days, "Number of weekdays to generate");

    CLI::App* train = app.add_subcommand("train", "Train one model end to end and checkpoint it");
    train->add_option("--model", o.model,
                      "Architecture: res-transformer, a-e, bpnn, cnn1d, cnn2d, lstm, convlstm, "
                      "stresnet, transformer");

    CLI::App* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a dataset part");
    evaluate->add_option("--model", o.model, "Checkpoint file to load");
    evaluate->add_option("--split", o.split, "Dataset part: train, validation, test (default)");

    CLI::App* ablate = app.add_subcommand("ablate", "Train the full model and variants a-e");
    CLI::App* compare = app.add_subcommand("compare", "Train the full model and the 7 baselines");

    CLI::App* attention = app.add_subcommand("attention", "Export score matrices for one sample");
    attention->add_option("--model", o.model, "Checkpoint file to load");
    attention->add_option("--split", o.split, "Dataset part: train, validation, test (default)");
    attention->add_option("--sample-index", o.sample_index, "Sample to visualize (default 0)");

    CLI::App* sweep = app.add_subcommand("sweep", "Coordinate-descent hyperparameter sweep");
    sweep->add_option("--model", o.model, "Architecture to sweep (default res-transformer)");

    for (CLI::App* cmd : {synth, train, evaluate, ablate, compare, attention, sweep})
        add_common_flags(cmd, o, seed_seen, lr_seen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    o.seed_set = seed_seen;
    o.lr_set = lr_seen;
    o.command = app.get_subcommands().front()->get_name();

    try {
        flowcast::cli::run(o);
        return 0;
    } catch (const flowcast::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const flowcast::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const flowcast::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const flowcast::TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
