#include "i2mv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

namespace i2mv {

namespace {

using nlohmann::json;

std::string padded(const std::string& prefix, int i) {
    std::string n = std::to_string(i);
    if (n.size() < 2) n = "0" + n;
    return prefix + n;
}

struct SynthClass {
    std::string name;
    Split split;
    std::vector<int> attrs;  // indices into the attribute vocabulary
};

std::vector<int> pick_distinct_set(std::mt19937_64& rng, const std::vector<int>& pool, int k,
                                   std::set<std::vector<int>>& used) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::set<int> s;
        while (static_cast<int>(s.size()) < k) s.insert(pool[pick(rng)]);
        std::vector<int> v(s.begin(), s.end());
        if (used.insert(v).second) return v;
    }
    throw ConfigError("synth: cannot draw distinct attribute sets; enlarge the attribute pool");
}

Mat make_image(const SynthClass& cls, const std::vector<Eigen::VectorXd>& attr_dirs,
               const SynthSpec& spec, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, cls.attrs.size() - 1);
    Mat img(spec.patches + 1, spec.d_backbone);
    for (int p = 0; p < spec.patches; ++p) {
        const Eigen::VectorXd& dir = attr_dirs[static_cast<std::size_t>(cls.attrs[pick(rng)])];
        for (int j = 0; j < spec.d_backbone; ++j) {
            img(p + 1, j) = dir(j) + spec.noise_sigma * gauss(rng);
        }
    }
    img.row(0) = img.bottomRows(spec.patches).colwise().mean();
    // Features travel as f32 on disk; quantize now so memory and file agree.
    for (Index i = 0; i < img.size(); ++i) {
        img.data()[i] = static_cast<double>(static_cast<float>(img.data()[i]));
    }
    return img;
}

}  // namespace

void SynthSpec::validate() const {
    if (attrs_per_class < 1) throw ConfigError("synth: attrs_per_class must be >= 1");
    if (attribute_words < attrs_per_class) {
        throw ConfigError("synth: attribute_words must cover attrs_per_class");
    }
    if (seen_classes < 1 || val_classes < 1 || unseen_classes < 1) {
        throw ConfigError("synth: every split needs at least one class");
    }
    if (images_per_class < 2) throw ConfigError("synth: images_per_class must be >= 2");
    if (eval_images_per_class < 1) throw ConfigError("synth: eval_images_per_class must be >= 1");
    if (patches < 1) throw ConfigError("synth: patches must be >= 1");
    if (d_backbone < 1 || embed_dim < 1) throw ConfigError("synth: dimensions must be >= 1");
    if (views_per_class < 1) throw ConfigError("synth: views_per_class must be >= 1");
    if (reveal_attrs < 0 || reveal_attrs > attrs_per_class) {
        throw ConfigError("synth: reveal_attrs must be in [0, attrs_per_class]");
    }
    const int revealed = reveal_attrs == 0 ? attrs_per_class : reveal_attrs;
    if (tokens_per_view < revealed) {
        throw ConfigError("synth: tokens_per_view too small for the revealed attribute words");
    }
    if (noise_words < 1) throw ConfigError("synth: noise_words must be >= 1");
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) {
        throw ConfigError("synth: heldout_fraction must lie in [0, 1)");
    }
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
}

json SynthSpec::to_json() const {
    return json{{"attribute_words", attribute_words},
                {"noise_words", noise_words},
                {"seen_classes", seen_classes},
                {"val_classes", val_classes},
                {"unseen_classes", unseen_classes},
                {"attrs_per_class", attrs_per_class},
                {"images_per_class", images_per_class},
                {"eval_images_per_class", eval_images_per_class},
                {"patches", patches},
                {"d_backbone", d_backbone},
                {"tokens_per_view", tokens_per_view},
                {"views_per_class", views_per_class},
                {"embed_dim", embed_dim},
                {"noise_sigma", noise_sigma},
                {"reveal_attrs", reveal_attrs},
                {"heldout_fraction", heldout_fraction}};
}

SynthSpec SynthSpec::from_json(const json& j) {
    SynthSpec spec;
    const json defaults = spec.to_json();
    if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw ConfigError("synth spec: unknown key '" + key + "'");
        (void)value;
    }
    try {
        spec.attribute_words = j.value("attribute_words", spec.attribute_words);
        spec.noise_words = j.value("noise_words", spec.noise_words);
        spec.seen_classes = j.value("seen_classes", spec.seen_classes);
        spec.val_classes = j.value("val_classes", spec.val_classes);
        spec.unseen_classes = j.value("unseen_classes", spec.unseen_classes);
        spec.attrs_per_class = j.value("attrs_per_class", spec.attrs_per_class);
        spec.images_per_class = j.value("images_per_class", spec.images_per_class);
        spec.eval_images_per_class = j.value("eval_images_per_class", spec.eval_images_per_class);
        spec.patches = j.value("patches", spec.patches);
        spec.d_backbone = j.value("d_backbone", spec.d_backbone);
        spec.tokens_per_view = j.value("tokens_per_view", spec.tokens_per_view);
        spec.views_per_class = j.value("views_per_class", spec.views_per_class);
        spec.embed_dim = j.value("embed_dim", spec.embed_dim);
        spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
        spec.reveal_attrs = j.value("reveal_attrs", spec.reveal_attrs);
        spec.heldout_fraction = j.value("heldout_fraction", spec.heldout_fraction);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

void check_view_leakage(const ViewCorpus& corpus,
                        const std::vector<std::string>& attribute_words) {
    std::set<std::string> attr_set(attribute_words.begin(), attribute_words.end());
    std::set<std::string> seen_attrs;
    for (const auto& c : corpus.classes) {
        if (c.split != Split::seen) continue;
        for (const auto& view : c.views) {
            std::istringstream ss(view);
            std::string w;
            while (ss >> w)
                if (attr_set.contains(w)) seen_attrs.insert(w);
        }
    }
    for (const auto& c : corpus.classes) {
        if (c.split == Split::seen) continue;
        for (const auto& view : c.views) {
            std::istringstream ss(view);
            std::string w;
            while (ss >> w) {
                if (attr_set.contains(w) && !seen_attrs.contains(w)) {
                    throw DataError("leakage contract: " + split_name(c.split) + " class '" +
                                    c.name + "' uses attribute '" + w +
                                    "' that no seen-class view mentions");
                }
            }
        }
    }
}

SynthBundle synth_gen(std::uint64_t seed, const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    // Attribute directions: random unit vectors in backbone space.
    std::vector<Eigen::VectorXd> attr_dirs;
    std::vector<std::string> attr_words;
    for (int a = 0; a < spec.attribute_words; ++a) {
        Eigen::VectorXd v(spec.d_backbone);
        for (int j = 0; j < spec.d_backbone; ++j) v(j) = gauss(rng);
        attr_dirs.push_back(v.normalized());
        attr_words.push_back(padded("attr", a));
    }
    std::vector<std::string> noise_vocab;
    for (int w = 0; w < spec.noise_words; ++w) noise_vocab.push_back(padded("pad", w));

    // Word vectors, one distinct vector per token.
    SynthBundle bundle;
    for (const auto& word : attr_words) {
        Eigen::VectorXd v(spec.embed_dim);
        for (int j = 0; j < spec.embed_dim; ++j) v(j) = uni(rng);
        bundle.embeddings.add(word, std::move(v));
    }
    for (const auto& word : noise_vocab) {
        Eigen::VectorXd v(spec.embed_dim);
        for (int j = 0; j < spec.embed_dim; ++j) v(j) = uni(rng);
        bundle.embeddings.add(word, std::move(v));
    }
    for (std::size_t i = 0; i < bundle.embeddings.vectors.size(); ++i) {
        for (std::size_t k = i + 1; k < bundle.embeddings.vectors.size(); ++k) {
            if (bundle.embeddings.vectors[i] == bundle.embeddings.vectors[k]) {
                throw std::runtime_error("synth: drew identical word vectors");
            }
        }
    }

    // Class attribute sets. Seen classes sample the whole pool; val/unseen
    // sample only attributes some seen class already uses, which keeps the
    // transfer task closed over training vocabulary.
    std::vector<int> full_pool(spec.attribute_words);
    for (int a = 0; a < spec.attribute_words; ++a) full_pool[static_cast<std::size_t>(a)] = a;
    std::set<std::vector<int>> used_sets;
    std::vector<SynthClass> classes;
    int class_id = 0;
    std::set<int> seen_attr_union;
    for (int c = 0; c < spec.seen_classes; ++c) {
        SynthClass sc{padded("class", class_id++), Split::seen,
                      pick_distinct_set(rng, full_pool, spec.attrs_per_class, used_sets)};
        seen_attr_union.insert(sc.attrs.begin(), sc.attrs.end());
        classes.push_back(std::move(sc));
    }
    std::vector<int> seen_pool(seen_attr_union.begin(), seen_attr_union.end());
    if (static_cast<int>(seen_pool.size()) < spec.attrs_per_class) {
        throw ConfigError("synth: seen classes cover too few attributes for transfer");
    }
    for (int c = 0; c < spec.val_classes; ++c) {
        classes.push_back({padded("class", class_id++), Split::val,
                           pick_distinct_set(rng, seen_pool, spec.attrs_per_class, used_sets)});
    }
    for (int c = 0; c < spec.unseen_classes; ++c) {
        classes.push_back({padded("class", class_id++), Split::unseen,
                           pick_distinct_set(rng, seen_pool, spec.attrs_per_class, used_sets)});
    }

    // Views: revealed attribute words shuffled into filler padding.
    const int reveal = spec.reveal_attrs == 0 ? spec.attrs_per_class : spec.reveal_attrs;
    std::uniform_int_distribution<std::size_t> pick_noise(0, noise_vocab.size() - 1);
    for (const auto& cls : classes) {
        ClassViews cv;
        cv.name = cls.name;
        cv.split = cls.split;
        for (int v = 0; v < spec.views_per_class; ++v) {
            std::vector<std::string> words;
            for (int j = 0; j < reveal; ++j) {
                const int ai = cls.attrs[static_cast<std::size_t>((v + j) % spec.attrs_per_class)];
                words.push_back(attr_words[static_cast<std::size_t>(ai)]);
            }
            while (static_cast<int>(words.size()) < spec.tokens_per_view) {
                words.push_back(noise_vocab[pick_noise(rng)]);
            }
            std::shuffle(words.begin(), words.end(), rng);
            std::string text;
            for (std::size_t w = 0; w < words.size(); ++w) {
                if (w) text += ' ';
                text += words[w];
            }
            cv.views.push_back(std::move(text));
            cv.source_tags.push_back("synth");
        }
        bundle.corpus.classes.push_back(std::move(cv));
    }
    bundle.corpus.validate();
    check_view_leakage(bundle.corpus, attr_words);

    // Images. Draw order is fixed: seen train pool, val, test seen, test unseen.
    auto init_file = [&](FeatureFile& f) {
        f.patches = spec.patches;
        f.dim = spec.d_backbone;
    };
    init_file(bundle.train);
    init_file(bundle.val);
    init_file(bundle.heldout);
    init_file(bundle.test_unseen);
    init_file(bundle.test_gzsl);

    const int heldout_per_class =
        spec.heldout_fraction == 0.0
            ? 0
            : std::max(1, static_cast<int>(
                              std::lround(spec.heldout_fraction * spec.images_per_class)));
    if (heldout_per_class >= spec.images_per_class) {
        throw ConfigError("synth: heldout fraction leaves no training images");
    }

    for (const auto& cls : classes) {
        if (cls.split != Split::seen) continue;
        for (int i = 0; i < spec.images_per_class; ++i) {
            PatchFeatureRecord rec{cls.name, make_image(cls, attr_dirs, spec, rng)};
            if (i >= spec.images_per_class - heldout_per_class) {
                bundle.heldout.records.push_back(std::move(rec));
            } else {
                bundle.train.records.push_back(std::move(rec));
            }
        }
    }
    for (const auto& cls : classes) {
        if (cls.split != Split::val) continue;
        for (int i = 0; i < spec.eval_images_per_class; ++i) {
            PatchFeatureRecord rec{cls.name, make_image(cls, attr_dirs, spec, rng)};
            bundle.val.records.push_back(rec);
            bundle.heldout.records.push_back(std::move(rec));
        }
    }
    for (const auto& cls : classes) {
        if (cls.split != Split::seen) continue;
        for (int i = 0; i < spec.eval_images_per_class; ++i) {
            bundle.test_gzsl.records.push_back({cls.name, make_image(cls, attr_dirs, spec, rng)});
        }
    }
    for (const auto& cls : classes) {
        if (cls.split != Split::unseen) continue;
        for (int i = 0; i < spec.eval_images_per_class; ++i) {
            PatchFeatureRecord rec{cls.name, make_image(cls, attr_dirs, spec, rng)};
            bundle.test_unseen.records.push_back(rec);
            bundle.test_gzsl.records.push_back(std::move(rec));
        }
    }
    return bundle;
}

void write_synth_bundle(const SynthBundle& bundle, const std::filesystem::path& dir,
                        std::uint64_t seed, const SynthSpec& spec) {
    std::filesystem::create_directories(dir);
    save_embeddings(bundle.embeddings, dir / "embeddings.txt");
    save_views(bundle.corpus, dir / "views.json");
    save_features(bundle.train, dir / "train.bin");
    save_features(bundle.val, dir / "val.bin");
    save_features(bundle.heldout, dir / "heldout.bin");
    save_features(bundle.test_unseen, dir / "test_unseen.bin");
    save_features(bundle.test_gzsl, dir / "test_gzsl.bin");
    nlohmann::json manifest{{"seed", seed}, {"spec", spec.to_json()}};
    save_json_file(manifest, dir / "synth_manifest.json");
}

}  // namespace i2mv
