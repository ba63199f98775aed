#include "triqdef/checkpoint.hpp"

#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"

namespace triqdef::checkpoint {

namespace {

constexpr const char* kMagic = "TQCKPT01";

void write_weights(binio::Writer& w, const models::Weights& ws) {
    w.u64(ws.size());
    for (const auto& t : ws) w.tensor(t);
}

models::Weights read_weights(binio::Reader& r, const models::ModelDef& def) {
    const std::uint64_t n = r.u64();
    if (n != def.params.size()) r.fail("weight count does not match architecture " + def.arch);
    models::Weights ws;
    for (std::size_t i = 0; i < n; ++i) {
        ws.push_back(r.tensor());
        if (ws.back().shape() != def.params[i].shape) r.fail("shape mismatch for parameter " + def.params[i].name);
    }
    return ws;
}

void write_spec(binio::Writer& w, const quant::QuantSpec& q) {
    w.i64(q.bits);
    w.f64(q.scale);
    w.f64(q.zero_point);
    w.f64(q.clip_lo);
    w.f64(q.clip_hi);
}

quant::QuantSpec read_spec(binio::Reader& r) {
    quant::QuantSpec q;
    q.bits = static_cast<int>(r.i64());
    q.scale = r.f64();
    q.zero_point = r.f64();
    q.clip_lo = r.f64();
    q.clip_hi = r.f64();
    return q;
}

void write_spec_map(binio::Writer& w, const std::map<std::string, quant::QuantSpec>& m) {
    w.u64(m.size());
    for (const auto& [name, q] : m) {
        w.str(name);
        write_spec(w, q);
    }
}

std::map<std::string, quant::QuantSpec> read_spec_map(binio::Reader& r) {
    std::map<std::string, quant::QuantSpec> m;
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = r.str();
        m.emplace(std::move(name), read_spec(r));
    }
    return m;
}

void section(binio::Writer& out, const std::string& name, const binio::Writer& body) {
    out.str(name);
    out.str(body.buffer());
}

binio::Reader open_section(binio::Reader& r, const std::string& expected, const std::string& source) {
    const std::string name = r.str();
    if (name != expected) r.fail("expected section '" + expected + "', found '" + name + "'");
    return binio::Reader(r.str(), source + " [" + expected + "]");
}

void finish(const binio::Reader& r) {
    if (!r.at_end()) r.fail("trailing bytes in section");
}

} // namespace

std::string encode(const training::TrainState& s) {
    binio::Writer out;
    out.bytes(kMagic, 8);
    out.u32(kFormatVersion);

    binio::Writer cfg;
    cfg.str(s.config.to_text());
    section(out, "config", cfg);

    binio::Writer sched;
    sched.u64(s.schedule.total_epochs);
    sched.str(curriculum::to_string(s.schedule.mode));
    sched.u64(s.schedule.bits.size());
    for (int b : s.schedule.bits) sched.i64(b);
    sched.u64(s.schedule.stages.size());
    for (const auto& st : s.schedule.stages) {
        sched.u64(st.start_epoch);
        sched.u64(st.bits_added.size());
        for (int b : st.bits_added) sched.i64(b);
    }
    section(out, "schedule", sched);

    const EnsembleState& e = s.ensemble;
    binio::Writer ens;
    ens.str(e.def.arch);
    ens.u64(e.def.in_channels);
    ens.u64(e.def.image_size);
    ens.u64(e.def.classes);
    ens.str(to_string(e.mode));
    ens.u64(e.epoch);
    ens.u64(e.active.size());
    for (int b : e.active) ens.i64(b);
    write_weights(ens, e.master);
    ens.u64(e.copies.size());
    for (const auto& [b, w] : e.copies) {
        ens.i64(b);
        write_weights(ens, w);
    }
    section(out, "ensemble", ens);

    binio::Writer q;
    q.u64(e.quant.size());
    for (const auto& [b, mq] : e.quant) {
        q.i64(b);
        q.i64(mq.bits);
        write_spec_map(q, mq.weights);
        write_spec_map(q, mq.activations);
    }
    section(out, "quant", q);

    binio::Writer opt;
    opt.u64(s.step);
    opt.u64(s.velocity.size());
    for (const auto& [k, v] : s.velocity) {
        opt.i64(k);
        write_weights(opt, v);
    }
    section(out, "optimizer", opt);

    binio::Writer rng;
    rng.str(s.rng.state());
    section(out, "rng", rng);

    binio::Writer pool;
    pool.u64(s.pool.size());
    for (const auto& p : s.pool) pool.str(attacks::encode_patch(p));
    section(out, "pool", pool);
    return out.buffer();
}

training::TrainState decode(const std::string& bytes, const std::string& source) {
    binio::Reader r(bytes, source);
    r.expect_magic(kMagic);
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    training::TrainState s;

    {
        auto c = open_section(r, "config", source);
        try {
            s.config = RunConfig::from_text(c.str(), source + " [config]");
        } catch (const InvalidArgument& e) {
            c.fail(e.what());
        }
        finish(c);
    }
    {
        auto c = open_section(r, "schedule", source);
        s.schedule.total_epochs = c.u64();
        try {
            s.schedule.mode = curriculum::parse_mode(c.str());
        } catch (const InvalidArgument& e) {
            c.fail(e.what());
        }
        const auto nb = c.u64();
        for (std::uint64_t i = 0; i < nb; ++i) s.schedule.bits.push_back(static_cast<int>(c.i64()));
        const auto ns = c.u64();
        for (std::uint64_t i = 0; i < ns; ++i) {
            curriculum::Stage st;
            st.start_epoch = c.u64();
            const auto k = c.u64();
            for (std::uint64_t j = 0; j < k; ++j) st.bits_added.push_back(static_cast<int>(c.i64()));
            s.schedule.stages.push_back(std::move(st));
        }
        finish(c);
        if (s.schedule != curriculum::build_schedule(s.config.epochs, s.config.bits, s.config.curriculum)) {
            r.fail("stored schedule does not match the configuration");
        }
    }
    {
        auto c = open_section(r, "ensemble", source);
        EnsembleState& e = s.ensemble;
        const std::string arch = c.str();
        const auto in_ch = c.u64(), image = c.u64(), classes = c.u64();
        try {
            e.def = models::ModelDef::make(arch, in_ch, image, classes);
            e.mode = parse_ensemble_mode(c.str());
        } catch (const InvalidArgument& ex) {
            c.fail(ex.what());
        }
        e.epoch = c.u64();
        const auto na = c.u64();
        for (std::uint64_t i = 0; i < na; ++i) e.active.push_back(static_cast<int>(c.i64()));
        e.master = read_weights(c, e.def);
        const auto nc = c.u64();
        for (std::uint64_t i = 0; i < nc; ++i) {
            const int b = static_cast<int>(c.i64());
            e.copies[b] = read_weights(c, e.def);
        }
        finish(c);
    }
    {
        auto c = open_section(r, "quant", source);
        const auto n = c.u64();
        for (std::uint64_t i = 0; i < n; ++i) {
            const int b = static_cast<int>(c.i64());
            quant::ModelQuant mq;
            mq.bits = static_cast<int>(c.i64());
            mq.weights = read_spec_map(c);
            mq.activations = read_spec_map(c);
            s.ensemble.quant[b] = std::move(mq);
        }
        finish(c);
    }
    {
        auto c = open_section(r, "optimizer", source);
        s.step = c.u64();
        const auto n = c.u64();
        for (std::uint64_t i = 0; i < n; ++i) {
            const int k = static_cast<int>(c.i64());
            s.velocity[k] = read_weights(c, s.ensemble.def);
        }
        finish(c);
    }
    {
        auto c = open_section(r, "rng", source);
        try {
            s.rng.set_state(c.str());
        } catch (const DataError& e) {
            c.fail(e.what());
        }
        finish(c);
    }
    {
        auto c = open_section(r, "pool", source);
        const auto n = c.u64();
        for (std::uint64_t i = 0; i < n; ++i) {
            s.pool.push_back(attacks::decode_patch(c.str(), source + " [pool #" + std::to_string(i) + "]"));
        }
        finish(c);
    }
    if (!r.at_end()) r.fail("trailing bytes after last section");
    return s;
}

void save(const std::string& path, const training::TrainState& s) { binio::write_file(path, encode(s)); }

training::TrainState load(const std::string& path) { return decode(binio::read_file(path), path); }

} // namespace triqdef::checkpoint
