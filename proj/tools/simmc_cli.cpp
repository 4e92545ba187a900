// Command-line front end: corpus generation, matching pretraining, task
// fine-tuning, evaluation, decoding, and the fixed-seed reproduction run.
// Exit codes: 0 success, 1 usage, 2 data or configuration problem, 3
// training aborted on a non-finite value.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include <simmc/pipeline.hpp>

namespace {

struct DataArgs {
    std::string data;
};

struct TrainArgs {
    std::string data, out, init, log;
    simmc::TrainOptions opts;
};

void add_data_option(CLI::App* sub, std::string& path) {
    sub->add_option("--data", path, "corpus file")->required();
}

void add_train_options(CLI::App* sub, TrainArgs& a, int default_epochs) {
    add_data_option(sub, a.data);
    sub->add_option("--out", a.out, "checkpoint to write")->required();
    sub->add_option("--init", a.init, "checkpoint to start from");
    a.opts.epochs = default_epochs;
    sub->add_option("--seed", a.opts.seed, "master seed");
    sub->add_option("--epochs", a.opts.epochs, "training epochs");
    sub->add_option("--lr", a.opts.lr, "peak learning rate");
    sub->add_option("--batch", a.opts.batch, "gradient accumulation window");
    sub->add_option("--warmup", a.opts.warmup_frac, "warmup fraction of total steps");
    sub->add_option("--weight-decay", a.opts.weight_decay, "decoupled weight decay");
    sub->add_option("--clip", a.opts.clip_norm, "global gradient norm cap (0 disables)");
    sub->add_option("--log", a.opts.log_path, "JSONL training log");
}

void print_dev(const simmc::LossAcc& ev) {
    std::cout << "final dev loss=" << ev.loss << " accuracy=" << ev.accuracy << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal dialog pipeline: synthetic corpus, matching pretraining, "
                 "disambiguation, coreference, and response generation"};
    app.require_subcommand(1);

    // gen-data ---------------------------------------------------------------
    simmc::CorpusConfig cc;
    std::string gen_out;
    auto* gen_data = app.add_subcommand("gen-data", "generate a synthetic corpus");
    gen_data->add_option("--out", gen_out, "corpus file to write")->required();
    gen_data->add_option("--seed", cc.seed, "corpus seed");
    gen_data->add_option("--scenes", cc.n_scenes, "number of scenes");
    gen_data->add_option("--objects-min", cc.objects_min, "minimum objects per scene");
    gen_data->add_option("--objects-max", cc.objects_max, "maximum objects per scene");
    gen_data->add_option("--turns-min", cc.turns_min, "minimum turns per dialog");
    gen_data->add_option("--turns-max", cc.turns_max, "maximum turns per dialog");
    gen_data->callback([&] {
        simmc::Corpus corpus = simmc::generate_corpus(cc);
        simmc::save_corpus(corpus, gen_out);
        std::cout << "wrote " << corpus.scenes.size() << " scenes, " << corpus.dialogs.size()
                  << " dialogs to " << gen_out << "\n";
    });

    // pretrain-itm / pretrain-btm -------------------------------------------
    TrainArgs itm_args, btm_args;
    std::string itm_loss = "bce", btm_loss = "bce";
    int itm_k_neg = 1, btm_k_neg = 1;
    double itm_scale = 100.0, btm_scale = 100.0;
    int itm_d_joint = 64, btm_d_joint = 64;
    double itm_hard = 0.0, btm_hard = 0.0;
    double itm_drop = 0.0, btm_drop = 0.0;
    double itm_rank = 0.0, btm_rank = 0.0;
    auto add_pretrain = [&](const char* name, const char* help, TrainArgs& a, std::string& loss,
                            int& k_neg, double& scale, int& d_joint, double& hard, double& drop,
                            double& rank, simmc::MatchObjective objective) {
        auto* sub = app.add_subcommand(name, help);
        add_train_options(sub, a, 10);
        sub->add_option("--loss", loss, "matching loss")
            ->check(CLI::IsMember({"bce", "ce"}));
        sub->add_option("--k-neg", k_neg, "negatives per positive");
        sub->add_option("--score-scale", scale,
                        "cosine multiplier inside the match sigmoid (decisions are "
                        "scale-invariant; smaller keeps gradients alive from random init)");
        sub->add_option("--d-joint", d_joint,
                        "joint projection width (ignored when --init supplies heads)");
        sub->add_option("--hard-neg", hard,
                        "fraction of training negatives drawn from same-color objects");
        sub->add_option("--attr-drop", drop,
                        "fraction of training pairs reduced to a single-attribute text");
        sub->add_option("--rank", rank,
                        "weight of the positive-vs-own-negatives ranking loss");
        sub->callback([&a, &loss, &k_neg, &scale, &d_joint, &hard, &drop, &rank, objective] {
            simmc::Corpus corpus = simmc::load_corpus(a.data);
            simmc::LossKind kind = loss == "ce" ? simmc::LossKind::CE : simmc::LossKind::BCE;
            print_dev(simmc::pretrain_command(corpus, objective, a.init, kind, k_neg, a.opts,
                                              a.out, scale, d_joint, hard, drop, rank));
        });
    };
    add_pretrain("pretrain-itm", "match object crops against attribute phrases", itm_args,
                 itm_loss, itm_k_neg, itm_scale, itm_d_joint, itm_hard, itm_drop, itm_rank,
                 simmc::MatchObjective::ITM);
    add_pretrain("pretrain-btm", "match scene backgrounds against dialog context", btm_args,
                 btm_loss, btm_k_neg, btm_scale, btm_d_joint, btm_hard, btm_drop, btm_rank,
                 simmc::MatchObjective::BTM);

    // train-disambiguation ---------------------------------------------------
    TrainArgs disamb_args;
    {
        auto* sub = app.add_subcommand("train-disambiguation",
                                       "classify whether a user turn needs clarification");
        add_train_options(sub, disamb_args, 10);
        sub->callback([&] {
            simmc::Corpus corpus = simmc::load_corpus(disamb_args.data);
            print_dev(simmc::train_disamb_command(corpus, disamb_args.init, disamb_args.opts,
                                                  disamb_args.out));
        });
    }

    // train-coref ------------------------------------------------------------
    TrainArgs coref_args;
    simmc::CorefFlags coref_flags;
    {
        auto* sub = app.add_subcommand("train-coref",
                                       "match referenced objects against the dialog context");
        add_train_options(sub, coref_args, 10);
        sub->add_flag_callback("--no-mention-inform",
                               [&] { coref_flags.mention_inform = false; },
                               "train on all scene objects instead of mentioned ones");
        sub->add_flag_callback("--no-utterance-head",
                               [&] { coref_flags.utterance_head = false; },
                               "drop the utterance relevance gate");
        sub->add_flag_callback("--no-system-head", [&] { coref_flags.system_head = false; },
                               "drop the system-turn relevance head");
        sub->add_flag_callback("--no-system-augmentation",
                               [&] { coref_flags.system_augmentation = false; },
                               "skip the system-side training examples");
        sub->callback([&] {
            simmc::Corpus corpus = simmc::load_corpus(coref_args.data);
            print_dev(simmc::train_coref_command(corpus, coref_args.init, coref_flags,
                                                 coref_args.opts, coref_args.out));
        });
    }

    // train-generator --------------------------------------------------------
    TrainArgs gen_args;
    simmc::GenFlags gen_flags;
    {
        auto* sub = app.add_subcommand("train-generator", "train the response decoder");
        add_train_options(sub, gen_args, 10);
        sub->add_flag_callback("--no-objects", [&] { gen_flags.use_objects = false; },
                               "drop object-crop conditioning");
        sub->add_flag_callback("--no-meta", [&] { gen_flags.use_meta = false; },
                               "drop slot-value conditioning");
        sub->add_flag_callback("--user-augmentation",
                               [&] { gen_flags.user_augmentation = true; },
                               "also train on user-side turns");
        sub->callback([&] {
            simmc::Corpus corpus = simmc::load_corpus(gen_args.data);
            print_dev(simmc::train_gen_command(corpus, gen_args.init, gen_flags, gen_args.opts,
                                               gen_args.out));
        });
    }

    // evaluate ---------------------------------------------------------------
    std::string eval_data, eval_task, eval_model, eval_secondary, eval_split = "test",
                eval_pred;
    uint64_t eval_seed = 7;
    int eval_max_new = 32;
    {
        auto* sub = app.add_subcommand("evaluate", "score a checkpoint on a corpus split");
        add_data_option(sub, eval_data);
        sub->add_option("--task", eval_task, "task to score")
            ->required()
            ->check(CLI::IsMember({"itm", "btm", "disambiguation", "coref", "generation"}));
        sub->add_option("--model", eval_model, "checkpoint to score")->required();
        sub->add_option("--secondary", eval_secondary,
                        "unrestricted coreference checkpoint (enables the remaining variants)");
        sub->add_option("--split", eval_split, "corpus split")
            ->check(CLI::IsMember({"train", "dev", "test"}));
        sub->add_option("--out", eval_pred, "per-example predictions (JSON lines)");
        sub->add_option("--seed", eval_seed, "seed for matching example sampling");
        sub->add_option("--max-new", eval_max_new, "decode budget for generation");
        sub->callback([&] {
            simmc::Corpus corpus = simmc::load_corpus(eval_data);
            nlohmann::json result;
            if (eval_task == "itm" || eval_task == "btm") {
                result = simmc::evaluate_matching_command(corpus, eval_model, eval_split,
                                                          eval_seed);
                if (result.at("task") != eval_task)
                    throw simmc::CompatError("checkpoint objective '" +
                                             result.at("task").get<std::string>() +
                                             "' does not match task '" + eval_task + "'");
            } else if (eval_task == "disambiguation") {
                result = simmc::evaluate_disamb_command(corpus, eval_model, eval_split,
                                                        eval_pred);
            } else if (eval_task == "coref") {
                result = simmc::evaluate_coref_command(corpus, eval_model, eval_secondary,
                                                       eval_split, eval_pred);
            } else {
                result = simmc::evaluate_generation_command(corpus, eval_model, eval_split,
                                                            eval_max_new, eval_pred);
            }
            std::cout << result.dump(2) << "\n";
        });
    }

    // generate ---------------------------------------------------------------
    std::string dec_data, dec_model;
    int dec_dialog = 0, dec_turn = -1, dec_max_new = 32;
    {
        auto* sub = app.add_subcommand("generate", "decode replies for a dialog");
        add_data_option(sub, dec_data);
        sub->add_option("--model", dec_model, "generator checkpoint")->required();
        sub->add_option("--dialog", dec_dialog, "dialog id")->required();
        sub->add_option("--turn", dec_turn, "turn index (default: every turn)");
        sub->add_option("--max-new", dec_max_new, "decode budget");
        sub->callback([&] {
            simmc::Corpus corpus = simmc::load_corpus(dec_data);
            for (const auto& line :
                 simmc::decode_command(corpus, dec_model, dec_dialog, dec_turn, dec_max_new))
                std::cout << line << "\n";
        });
    }

    // repro-all --------------------------------------------------------------
    simmc::ReproConfig rc;
    std::string repro_workdir;
    {
        auto* sub = app.add_subcommand(
            "repro-all", "run the whole pipeline at reduced size into a work directory");
        sub->add_option("--workdir", repro_workdir, "output directory")->required();
        sub->add_option("--seed", rc.seed, "master seed");
        sub->add_option("--scenes", rc.scenes, "corpus size");
        sub->add_option("--epochs-itm", rc.epochs_itm, "crop matching epochs");
        sub->add_option("--epochs-btm", rc.epochs_btm, "background matching epochs");
        sub->add_option("--epochs-disambiguation", rc.epochs_disamb, "disambiguation epochs");
        sub->add_option("--epochs-coref", rc.epochs_coref, "coreference epochs");
        sub->add_option("--epochs-generator", rc.epochs_gen, "generator epochs");
        sub->add_option("--lr", rc.lr, "peak learning rate");
        sub->add_option("--batch", rc.batch, "gradient accumulation window");
        sub->add_option("--max-new", rc.max_new, "decode budget for evaluation");
        sub->callback([&] {
            nlohmann::json summary = simmc::repro_all(repro_workdir, rc, &std::cerr);
            std::cout << summary.dump(2) << "\n";
        });
    }

    // Exit-code mapping lives here and only here.
    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const simmc::TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 3;
    } catch (const simmc::SimmcError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
