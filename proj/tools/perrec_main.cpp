// perrec: training and evaluation engine for per-group parameter-efficient
// fine-tuning of a frozen multimodal encoder inside a sequential recommender.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "perrec/analysis.hpp"
#include "perrec/report.hpp"
#include "perrec/synthetic.hpp"
#include "perrec/trainer.hpp"

using namespace perrec;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << text;
    if (!text.empty() && text.back() != '\n') out << "\n";
}

struct TrainArgs {
    RunConfig cfg;
    std::string method = "global-peft";
    std::string peft = "lora";
    std::string loss_mode = "standard_bce";
    bool include_seen = false;
    bool sweep = false;
};

void add_train_options(CLI::App* cmd, TrainArgs& a) {
    cmd->add_option("--method", a.method,
                    "wo-mm|frozen-mm|global-peft|user-level-1|user-level-2|group-level-1|"
                    "group-level-2|perpeft|v1-no-text|v2-no-vision|v3-full-negatives|"
                    "v4-large-global|v5-random-groups");
    cmd->add_option("--peft", a.peft, "lora|ia3|sidenet");
    cmd->add_option("--groups", a.cfg.groups, "number of user groups C");
    cmd->add_option("--epochs", a.cfg.epochs, "0 = method default (20 grouped, 30 otherwise)");
    cmd->add_option("--lr", a.cfg.lr, "learning rate");
    cmd->add_option("--wd", a.cfg.weight_decay, "weight decay");
    cmd->add_option("--loss-mode", a.loss_mode, "standard_bce|literal");
    cmd->add_option("--seed", a.cfg.seed, "master seed for all randomness");
    cmd->add_option("--data", a.cfg.data_dir, "dataset directory")->required();
    cmd->add_option("--out", a.cfg.out_path, "output checkpoint path")->required();
    cmd->add_option("--assign", a.cfg.assign_path, "group assignment JSON");
    cmd->add_option("--init-from", a.cfg.init_ckpt, "Global-PEFT checkpoint to initialize from");
    cmd->add_option("--batch-size", a.cfg.batch_size, "users per mini-batch");
    cmd->add_option("--rank", a.cfg.lora_rank, "LoRA rank");
    cmd->add_option("--side-hidden", a.cfg.side_hidden, "side-network hidden dim");
    cmd->add_option("--d", a.cfg.d, "transductive / SASRec dimension");
    cmd->add_option("--sasrec-blocks", a.cfg.sasrec_blocks);
    cmd->add_option("--sasrec-heads", a.cfg.sasrec_heads);
    cmd->add_option("--max-seq-len", a.cfg.max_seq_len);
    cmd->add_option("--dropout", a.cfg.dropout);
    cmd->add_option("--projector-hidden", a.cfg.projector_hidden);
    cmd->add_option("--enc-dim", a.cfg.encoder.d_model);
    cmd->add_option("--enc-layers", a.cfg.encoder.n_layers);
    cmd->add_option("--enc-heads", a.cfg.encoder.n_heads);
    cmd->add_option("--enc-vocab", a.cfg.encoder.vocab_size, "0 = derive from data");
    cmd->add_option("--enc-text-len", a.cfg.encoder.max_text_len);
    cmd->add_option("--enc-out", a.cfg.encoder.d_prime);
    cmd->add_option("--enc-seed", a.cfg.encoder.seed, "0 = derive from --seed");
    cmd->add_option("--eval-threads", a.cfg.eval_threads);
    cmd->add_option("--snapshot-epochs", a.cfg.snapshot_epochs,
                    "also save the best checkpoint of the first N epochs to <out>.stage1");
    cmd->add_flag("--include-seen", a.include_seen, "rank seen items too");
    cmd->add_flag("--sweep", a.sweep, "search the lr/wd grid, keep the best validation Hit@30");
}

RunConfig finalize_train_args(TrainArgs& a) {
    a.cfg.method = method_from(a.method);
    a.cfg.peft = peft_kind_from(a.peft);
    a.cfg.loss_mode = loss_mode_from(a.loss_mode);
    a.cfg.exclude_seen = !a.include_seen;
    // The encoder derives vocabulary/patch geometry from the data by default.
    a.cfg.encoder.n_patches = 0;
    a.cfg.encoder.patch_dim = 0;
    return a.cfg;
}

int run_train(TrainArgs& args) {
    RunConfig cfg = finalize_train_args(args);
    Dataset data = load_dataset(cfg.data_dir);

    if (args.sweep) {
        const std::vector<double> lrs = {1e-4, 5e-5, 1e-5};
        const std::vector<double> wds = {5e-4, 1e-4, 5e-5, 1e-5};
        TrainResult best;
        RunConfig best_cfg;
        bool have = false;
        for (double lr : lrs)
            for (double wd : wds) {
                RunConfig c = cfg;
                c.lr = lr;
                c.weight_decay = wd;
                TrainResult r = train(c, data);
                std::cerr << "sweep lr=" << lr << " wd=" << wd
                          << " val_hit30=" << r.best_val_hit30 << "\n";
                if (!have || r.best_val_hit30 > best.best_val_hit30) {
                    best = std::move(r);
                    best_cfg = c;
                    have = true;
                }
            }
        best.best.save(cfg.out_path);
        std::cout << "best lr=" << best_cfg.lr << " wd=" << best_cfg.weight_decay
                  << " val_hit30=" << best.best_val_hit30 << " epoch=" << best.best_epoch
                  << " -> " << cfg.out_path << "\n";
        return 0;
    }

    if (cfg.method == Method::LargeGlobal) {
        LargeGlobalSizing sz = size_large_global(cfg, data);
        if (sz.delta > 1000)
            std::cerr << "warning: large-global sizing missed the budget by " << sz.delta
                      << " parameters (nearest achievable " << sz.params << " vs target "
                      << sz.target << "); proceeding\n";
    }

    TrainResult r = train(cfg, data);
    r.best.save(cfg.out_path);
    if (r.snapshot) r.snapshot->save(cfg.out_path + ".stage1");
    for (size_t e = 0; e < r.history.size(); ++e)
        std::cerr << "epoch " << e << " loss=" << r.history[e].train_loss
                  << " val_hit30=" << r.history[e].val_hit30 << "\n";
    std::cout << "method=" << method_name(cfg.method) << " best_epoch=" << r.best_epoch
              << " val_hit30=" << r.best_val_hit30 << " -> " << cfg.out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"per-group PEFT recommender engine"};
    app.require_subcommand(1);
    // `perrec --config f.toml train ...`: file values fill [train]-style
    // sections, command-line flags override them.
    app.set_config("--config", "", "TOML-style key=value config file ([subcommand] sections)");
    app.allow_config_extras(CLI::config_extras_mode::ignore_all);

    // gen-data ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a planted-structure synthetic dataset");
    SyntheticSpec spec;
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--users", spec.n_users);
    gen->add_option("--items", spec.n_items);
    gen->add_option("--groups", spec.n_groups, "planted groups");
    gen->add_option("--aspects", spec.aspects_per_group, "aspect classes per group");
    gen->add_option("--noise", spec.noise, "cross-group purchase rate");
    gen->add_option("--stickiness", spec.stickiness, "aspect-chain self-transition probability");
    gen->add_option("--min-len", spec.min_len);
    gen->add_option("--max-len", spec.max_len);
    gen->add_option("--filler-tokens", spec.n_filler_tokens);
    gen->add_option("--min-title", spec.min_title);
    gen->add_option("--max-title", spec.max_title);
    gen->add_option("--patches", spec.n_patches);
    gen->add_option("--patch-dim", spec.patch_dim);
    gen->add_option("--patch-signal", spec.patch_signal);
    gen->add_option("--patch-noise", spec.patch_noise);
    gen->add_option("--seed", spec.seed);

    // train -------------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train one method and save the best checkpoint");
    TrainArgs targs;
    add_train_options(tr, targs);

    // cluster -----------------------------------------------------------------
    auto* cl = app.add_subcommand("cluster", "k-means user grouping from a Global-PEFT checkpoint");
    std::string cl_data, cl_ckpt, cl_out;
    int cl_groups = 8;
    uint64_t cl_seed = 0;
    cl->add_option("--data", cl_data)->required();
    cl->add_option("--ckpt", cl_ckpt, "Global-PEFT checkpoint")->required();
    cl->add_option("--groups", cl_groups);
    cl->add_option("--seed", cl_seed);
    cl->add_option("--out", cl_out, "assignment JSON path")->required();

    // evaluate ------------------------------------------------------------
    auto* ev = app.add_subcommand("evaluate", "leave-one-out evaluation of a checkpoint");
    std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
    std::vector<int> ev_ks = {20, 30};
    int ev_threads = 1;
    bool ev_include_seen = false;
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--k", ev_ks, "cutoff list, e.g. --k 20,30")->delimiter(',');
    ev->add_option("--split", ev_split, "test|valid");
    ev->add_option("--out", ev_out, "metrics JSON path");
    ev->add_option("--threads", ev_threads);
    ev->add_flag("--include-seen", ev_include_seen);

    // params-report ---------------------------------------------------------
    auto* pr = app.add_subcommand("params-report", "parameter accounting");
    std::string pr_ckpt, pr_out;
    int64_t pr_peft = -1, pr_proj = -1, pr_sasrec = -1, pr_trans = -1, pr_foundation = 151323393;
    int pr_groups = 8;
    pr->add_option("--ckpt", pr_ckpt, "derive component counts from a checkpoint");
    pr->add_option("--peft-params", pr_peft);
    pr->add_option("--projector-params", pr_proj);
    pr->add_option("--sasrec-params", pr_sasrec);
    pr->add_option("--transductive-params", pr_trans);
    pr->add_option("--groups", pr_groups);
    pr->add_option("--foundation", pr_foundation, "foundation-model parameter count");
    pr->add_option("--out", pr_out, "JSON output path");

    // attn-jsd ------------------------------------------------------------
    auto* aj = app.add_subcommand("attn-jsd", "EOS-attention Jensen-Shannon analysis");
    std::string aj_data, aj_out;
    std::vector<std::string> aj_ckpts;
    aj->add_option("--data", aj_data)->required();
    aj->add_option("--ckpt", aj_ckpts, "personalized checkpoints (>= 2, differing seeds)")
        ->required()
        ->expected(-2);
    aj->add_option("--out", aj_out, "JSON output path");

    // report ---------------------------------------------------------------
    auto* rp = app.add_subcommand("report", "tabulate metrics JSON files");
    std::vector<std::string> rp_files;
    std::string rp_out, rp_params, rp_jsd;
    rp->add_option("files", rp_files, "metrics JSON files (label taken from filename)");
    rp->add_option("--params-json", rp_params, "params-report JSON to merge");
    rp->add_option("--jsd-json", rp_jsd, "attn-jsd JSON to merge");
    rp->add_option("--out", rp_out, "combined JSON output path");

    try {
        app.parse(argc, argv);

        if (gen->parsed()) {
            SyntheticData sd = generate_synthetic(spec);
            std::filesystem::create_directories(gen_out);
            save_synthetic(gen_out, sd, spec);
            std::cout << "wrote " << sd.data.n_items() << " items, " << sd.data.n_users()
                      << " users to " << gen_out << "\n";
        } else if (tr->parsed()) {
            return run_train(targs);
        } else if (cl->parsed()) {
            Dataset data = load_dataset(cl_data);
            Checkpoint ck = Checkpoint::load(cl_ckpt);
            ModelBundle bundle = bundle_from_checkpoint(ck, data);
            auto vecs = interest_vectors(bundle, data);
            GroupAssignment assign = kmeans_assignment(vecs, cl_groups, cl_seed, data);
            assign.save(cl_out);
            std::cout << "C=" << cl_groups << " assignment -> " << cl_out << "\n";
        } else if (ev->parsed()) {
            if (ev_split != "test" && ev_split != "valid")
                throw ConfigError("--split must be test or valid");
            Dataset data = load_dataset(ev_data);
            Checkpoint ck = Checkpoint::load(ev_ckpt);
            ModelBundle bundle = bundle_from_checkpoint(ck, data);
            bundle.cfg.eval_threads = ev_threads;
            if (ev_include_seen) bundle.cfg.exclude_seen = false;
            Metrics m = evaluate(bundle, data, ev_ks, ev_split == "test");
            const std::string js = m.to_json_string();
            if (!ev_out.empty()) write_text(ev_out, js);
            std::cout << js << "\n";
        } else if (pr->parsed()) {
            ParameterReport r;
            if (!pr_ckpt.empty()) {
                Checkpoint ck = Checkpoint::load(pr_ckpt);
                json meta = json::parse(ck.meta_json, nullptr, false);
                int groups = pr_groups;
                if (!meta.is_discarded() && meta.contains("config"))
                    groups = RunConfig::from_json_string(meta.at("config").dump()).groups;
                r = count_parameters(ck.prefix_params("peft/0"), ck.prefix_params("projector/0"),
                                     ck.prefix_params("sasrec"), ck.prefix_params("transductive"),
                                     groups, pr_foundation);
            } else {
                if (pr_peft < 0 || pr_proj < 0 || pr_sasrec < 0 || pr_trans < 0)
                    throw ConfigError(
                        "params-report needs --ckpt or all of --peft-params --projector-params "
                        "--sasrec-params --transductive-params");
                r = count_parameters(pr_peft, pr_proj, pr_sasrec, pr_trans, pr_groups, pr_foundation);
            }
            std::cout << render_param_report(r);
            if (!pr_out.empty()) write_text(pr_out, report_json({}, &r, nullptr));
        } else if (aj->parsed()) {
            Dataset data = load_dataset(aj_data);
            std::vector<SeedModules> seeds;
            ModelBundle first;
            bool have_first = false;
            std::string first_assign;
            for (const std::string& path : aj_ckpts) {
                Checkpoint ck = Checkpoint::load(path);
                ModelBundle b = bundle_from_checkpoint(ck, data);
                if (!method_grouped(b.cfg.method))
                    throw ConfigError("attn-jsd needs personalized checkpoints, got " +
                                      std::string(method_name(b.cfg.method)));
                const std::string assign_js = b.assign.to_json_string();
                if (!have_first) {
                    first = b;
                    first_assign = assign_js;
                    have_first = true;
                } else if (assign_js != first_assign) {
                    throw ConfigError("attn-jsd: checkpoints use different group assignments");
                }
                SeedModules sm;
                sm.seed = b.cfg.seed;
                sm.groups = std::move(b.peft);
                seeds.push_back(std::move(sm));
            }
            JsdReport rep = attention_analysis(first.encoder, seeds, data);
            std::cout << render_jsd_report(rep);
            if (!aj_out.empty()) write_text(aj_out, rep.to_json_string());
        } else if (rp->parsed()) {
            std::vector<RunRow> rows;
            for (const std::string& f : rp_files) {
                std::ifstream in(f);
                if (!in) throw DataError("cannot open " + f);
                json j = json::parse(in, nullptr, false);
                if (j.is_discarded()) throw DataError(f + ": malformed JSON");
                RunRow row;
                row.label = std::filesystem::path(f).stem().string();
                for (const auto& [k, v] : j.at("hit").items())
                    row.metrics.hit[std::stoi(k)] = v.get<double>();
                for (const auto& [k, v] : j.at("ndcg").items())
                    row.metrics.ndcg[std::stoi(k)] = v.get<double>();
                row.metrics.n_users = j.value("n_users", 0);
                rows.push_back(std::move(row));
            }
            ParameterReport params;
            bool have_params = false;
            if (!rp_params.empty()) {
                std::ifstream in(rp_params);
                if (!in) throw DataError("cannot open " + rp_params);
                json j = json::parse(in, nullptr, false);
                if (j.is_discarded() || !j.contains("params"))
                    throw DataError(rp_params + ": not a params-report artifact");
                const json& p = j.at("params");
                params = count_parameters(p.at("peft"), p.at("projector"), p.at("sasrec"),
                                          p.at("transductive"), p.at("groups"),
                                          p.at("foundation"));
                have_params = true;
            }
            JsdReport jsd;
            bool have_jsd = false;
            if (!rp_jsd.empty()) {
                std::ifstream in(rp_jsd);
                if (!in) throw DataError("cannot open " + rp_jsd);
                json j = json::parse(in, nullptr, false);
                if (j.is_discarded()) throw DataError(rp_jsd + ": malformed JSON");
                jsd.mean_intra = j.at("mean_intra").get<double>();
                jsd.mean_inter = j.at("mean_inter").get<double>();
                for (const auto& p : j.at("pairings"))
                    jsd.pairings.push_back({p.at("seed_a").get<uint64_t>(),
                                            p.at("seed_b").get<uint64_t>(),
                                            p.at("intra").get<double>(),
                                            p.at("inter").get<double>()});
                have_jsd = true;
            }
            std::cout << render_metrics_table(rows);
            if (have_params) std::cout << render_param_report(params);
            if (have_jsd) std::cout << render_jsd_report(jsd);
            if (!rp_out.empty())
                write_text(rp_out, report_json(rows, have_params ? &params : nullptr,
                                               have_jsd ? &jsd : nullptr));
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
