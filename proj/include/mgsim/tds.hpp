#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mgsim/common.hpp"
#include "mgsim/dynamics.hpp"
#include "mgsim/model.hpp"

namespace mgsim {

// ============================================================================
// Scheduled events
// ============================================================================

/// Discrete actions a simulation script can apply at step boundaries.
enum class EventKind {
    kLoadStep,              ///< add (dp, dq) to a named load's base demand
    kSetCapacity,           ///< change a unit's capacity reference
    kEnablePowerRegulator,  ///< arm a unit's power regulator with a reference
    kEnableVfRegulator,     ///< arm a unit's deviation regulator
    kEnableLimiter,         ///< install a current limiter configuration
    kShedLoad,              ///< shed a fraction of the currently served base load
};

[[nodiscard]] inline const char* to_string(EventKind kind) {
    switch (kind) {
        case EventKind::kLoadStep: return "load_step";
        case EventKind::kSetCapacity: return "set_capacity";
        case EventKind::kEnablePowerRegulator: return "enable_power_regulator";
        case EventKind::kEnableVfRegulator: return "enable_vf_regulator";
        case EventKind::kEnableLimiter: return "enable_limiter";
        case EventKind::kShedLoad: return "shed_load";
    }
    return "unknown";
}

/// One scheduled action; unused fields stay at their defaults.
struct Event {
    Real t = 0.0;
    EventKind kind = EventKind::kLoadStep;
    int unit = -1;           ///< target unit for unit-scoped kinds
    std::string load;        ///< target load name for kLoadStep
    Real dp = 0.0;           ///< active-power increment [pu]
    Real dq = 0.0;           ///< reactive-power increment [pu]
    Real s_ref = 0.0;        ///< capacity reference [pu]
    Real fraction = 0.0;     ///< shed fraction of currently served base load
    LimiterConfig limiter;   ///< configuration for kEnableLimiter
};

[[nodiscard]] inline Event load_step_event(Real t, std::string load, Real dp, Real dq) {
    Event e;
    e.t = t;
    e.kind = EventKind::kLoadStep;
    e.load = std::move(load);
    e.dp = dp;
    e.dq = dq;
    return e;
}

[[nodiscard]] inline Event set_capacity_event(Real t, int unit, Real s_ref) {
    Event e;
    e.t = t;
    e.kind = EventKind::kSetCapacity;
    e.unit = unit;
    e.s_ref = s_ref;
    return e;
}

[[nodiscard]] inline Event enable_power_regulator_event(Real t, int unit, Real s_ref) {
    Event e;
    e.t = t;
    e.kind = EventKind::kEnablePowerRegulator;
    e.unit = unit;
    e.s_ref = s_ref;
    return e;
}

[[nodiscard]] inline Event enable_vf_regulator_event(Real t, int unit) {
    Event e;
    e.t = t;
    e.kind = EventKind::kEnableVfRegulator;
    e.unit = unit;
    return e;
}

[[nodiscard]] inline Event enable_limiter_event(Real t, int unit, LimiterConfig limiter) {
    Event e;
    e.t = t;
    e.kind = EventKind::kEnableLimiter;
    e.unit = unit;
    e.limiter = limiter;
    return e;
}

[[nodiscard]] inline Event shed_load_event(Real t, Real fraction) {
    Event e;
    e.t = t;
    e.kind = EventKind::kShedLoad;
    e.fraction = fraction;
    return e;
}

// ============================================================================
// Simulation configuration and results
// ============================================================================

/// Default integration step for a fidelity level. The full model carries
/// filter/coupling resonances up to ~2.4e5 rad/s on the built-in fixtures,
/// which bounds the stable step of the classic fourth-order scheme well
/// below the reduced model's needs.
[[nodiscard]] inline Real default_time_step(Fidelity fidelity) {
    return fidelity == Fidelity::kFull ? 1.0e-5 : 1.0e-3;
}

struct TdsOptions {
    Real t_end = 20.0;
    Real dt = 0.0;        ///< integration step; 0 selects the fidelity default
    Real trace_dt = 1e-3;  ///< sampling interval for the trace and policy checks

    /// Load-side changes (steps and sheds) are spread linearly over this
    /// window. The full model's algebraic network is soft under fixed current
    /// injections (load voltage slope nearly cancels the injection slope), so
    /// an instantaneous step of more than a fraction of a percent pushes the
    /// voltage solution past its fold; a few milliseconds of smoothing keeps
    /// the inverter states tracking, as stray capacitance would physically.
    Real load_ramp = 0.005;

    bool auto_shed = true;          ///< execute shed requests raised by units
    Real shed_unit_fraction = 0.04;  ///< request size relative to a unit's reference
    Real shed_cooldown = 0.25;       ///< minimum spacing between shed actions [s]
    Real shed_cap = 0.95;            ///< never shed beyond this fraction of base load

    bool trip_enabled = false;  ///< open overloaded unregulated units
    Real trip_level = 1.5;      ///< overload threshold relative to the reference
    Real trip_window = 0.2;     ///< sustained overload time before opening [s]

    Real collapse_df = 0.5;    ///< |f - 1| beyond this is a frequency collapse
    Real collapse_vmax = 5.0;  ///< any |V| beyond this is a voltage collapse
};

/// One sampled instant of a run.
struct TraceFrame {
    Real t = 0.0;
    Real f_sys = 1.0;
    Real shed = 0.0;  ///< cumulative shed fraction of base load
    std::vector<UnitReport> units;
    Eigen::VectorXd v_mag;  ///< bus voltage magnitudes, extended network order
};

struct SimTrace {
    std::vector<TraceFrame> frames;

    [[nodiscard]] std::size_t size() const { return frames.size(); }

    /// Extract one unit-level signal over time via a member accessor.
    template <typename Getter>
    [[nodiscard]] std::vector<Real> unit_signal(int unit, Getter getter) const {
        std::vector<Real> out;
        out.reserve(frames.size());
        for (const auto& fr : frames) out.push_back(getter(fr.units[static_cast<std::size_t>(unit)]));
        return out;
    }

    /// Frame nearest to time t.
    [[nodiscard]] const TraceFrame& at_time(Real t) const {
        if (frames.empty()) throw ModelError("trace is empty");
        const TraceFrame* best = &frames.front();
        for (const auto& fr : frames)
            if (std::abs(fr.t - t) < std::abs(best->t - t)) best = &fr;
        return *best;
    }
};

enum class SimStatus { kFinished, kCollapsed };

[[nodiscard]] inline const char* to_string(SimStatus status) {
    return status == SimStatus::kFinished ? "finished" : "collapsed";
}

/// A discrete action that actually happened, scripted or policy-driven.
struct AppliedEvent {
    Real t = 0.0;
    std::string description;
};

struct SimResult {
    SimStatus status = SimStatus::kFinished;
    Real t_stop = 0.0;  ///< time reached (collapse instant when collapsed)
    Real dt = 0.0;      ///< integration step actually used
    std::string collapse_reason;
    SimTrace trace;
    std::vector<AppliedEvent> events;
    Eigen::VectorXd x_final;
};

/// Range of the key slow signals over the trailing window of a trace.
struct SteadySummary {
    bool steady = false;
    Real f_range = 0.0;
    Real s_range = 0.0;
};

/// Check whether the trace has settled: system frequency and every active
/// unit's apparent power stay within tight ranges over the last `window`
/// seconds.
[[nodiscard]] inline SteadySummary detect_steady_state(const SimTrace& trace, Real window,
                                                       Real f_tol = 1e-6, Real s_tol = 1e-5) {
    SteadySummary out;
    if (trace.frames.size() < 2) return out;
    const Real t_last = trace.frames.back().t;
    Real f_lo = 1e30, f_hi = -1e30;
    std::vector<Real> s_lo(trace.frames.back().units.size(), 1e30);
    std::vector<Real> s_hi(trace.frames.back().units.size(), -1e30);
    std::size_t seen = 0;
    for (const auto& fr : trace.frames) {
        if (fr.t < t_last - window) continue;
        ++seen;
        f_lo = std::min(f_lo, fr.f_sys);
        f_hi = std::max(f_hi, fr.f_sys);
        for (std::size_t k = 0; k < fr.units.size(); ++k) {
            if (!fr.units[k].active) continue;
            s_lo[k] = std::min(s_lo[k], fr.units[k].s_m);
            s_hi[k] = std::max(s_hi[k], fr.units[k].s_m);
        }
    }
    if (seen < 2) return out;
    out.f_range = f_hi - f_lo;
    for (std::size_t k = 0; k < s_lo.size(); ++k)
        if (s_hi[k] >= s_lo[k]) out.s_range = std::max(out.s_range, s_hi[k] - s_lo[k]);
    out.steady = out.f_range <= f_tol && out.s_range <= s_tol;
    return out;
}

// ============================================================================
// Fixed-step integration engine
// ============================================================================

namespace detail {

/// Map an event time onto a step index, requiring alignment with the grid.
[[nodiscard]] inline std::int64_t event_step(Real t, Real dt) {
    const auto step = static_cast<std::int64_t>(std::llround(t / dt));
    if (std::abs(static_cast<Real>(step) * dt - t) > 1e-9 * std::max(Real(1), std::abs(t)))
        throw ModelError("event time " + std::to_string(t) + " is not a multiple of the step " +
                         std::to_string(dt));
    return step;
}

class SimEngine {
public:
    SimEngine(MicrogridDynamics& dyn, const TdsOptions& opts) : dyn_(dyn), opts_(opts) {
        dt_ = opts.dt > 0 ? opts.dt : default_time_step(dyn.fidelity());
        if (opts.t_end <= 0) throw ModelError("simulation horizon must be positive");
        n_steps_ = static_cast<std::int64_t>(std::llround(opts.t_end / dt_));
        if (n_steps_ < 1) throw ModelError("simulation horizon is shorter than one step");
        stride_ = std::max<std::int64_t>(1, std::llround(opts.trace_dt / dt_));
        overload_since_.assign(static_cast<std::size_t>(dyn.n_units()), Real(-1));
    }

    [[nodiscard]] SimResult run(const Eigen::VectorXd& x0, std::vector<Event> events) {
        if (x0.size() != dyn_.n_states())
            throw ModelError("initial state has wrong dimension for this model");
        std::stable_sort(events.begin(), events.end(),
                         [](const Event& a, const Event& b) { return a.t < b.t; });
        std::vector<std::int64_t> ev_steps;
        ev_steps.reserve(events.size());
        for (const auto& e : events) {
            if (e.t < 0 || e.t > opts_.t_end + 1e-12)
                throw ModelError("event scheduled outside the simulation horizon");
            ev_steps.push_back(event_step(e.t, dt_));
        }

        res_ = SimResult{};
        res_.dt = dt_;
        x_ = x0;
        const auto n = static_cast<Eigen::Index>(dyn_.n_states());
        k1_.resize(n);
        k2_.resize(n);
        k3_.resize(n);
        k4_.resize(n);
        xt_.resize(n);
        scratch_ = DynamicsScratch{};
        last_shed_t_ = -1e30;
        std::fill(overload_since_.begin(), overload_since_.end(), Real(-1));

        std::size_t ev_i = 0;
        std::int64_t step = 0;
        for (; step <= n_steps_; ++step) {
            const Real t = static_cast<Real>(step) * dt_;
            while (ev_i < events.size() && ev_steps[ev_i] <= step) {
                apply_event(t, events[ev_i]);
                ++ev_i;
            }
            advance_ramps();
            if (step % stride_ == 0 || step == n_steps_) {
                if (!observe(t)) break;
            }
            if (step == n_steps_) break;
            if (!advance(t)) break;
        }
        res_.t_stop = res_.status == SimStatus::kCollapsed
                          ? collapse_t_
                          : static_cast<Real>(std::min(step, n_steps_)) * dt_;
        res_.x_final = x_;
        return std::move(res_);
    }

private:
    void collapse(Real t, std::string reason) {
        res_.status = SimStatus::kCollapsed;
        res_.collapse_reason = std::move(reason);
        collapse_t_ = t;
    }

    void apply_event(Real t, const Event& e) {
        switch (e.kind) {
            case EventKind::kLoadStep: {
                Ramp r;
                const auto n = ramp_steps();
                r.load = e.load;
                r.dp = e.dp / static_cast<Real>(n);
                r.dq = e.dq / static_cast<Real>(n);
                r.left = n;
                ramps_.push_back(std::move(r));
                log(t, "load step " + e.load + " dp=" + std::to_string(e.dp) +
                           " dq=" + std::to_string(e.dq));
                break;
            }
            case EventKind::kSetCapacity:
                dyn_.set_capacity_reference(e.unit, e.s_ref);
                log(t, "capacity[" + std::to_string(e.unit) + "] = " + std::to_string(e.s_ref));
                break;
            case EventKind::kEnablePowerRegulator:
                dyn_.enable_power_regulator(e.unit, t, e.s_ref);
                log(t, "power regulator on unit " + std::to_string(e.unit) +
                           " s_ref=" + std::to_string(e.s_ref));
                break;
            case EventKind::kEnableVfRegulator:
                dyn_.enable_vf_regulator(e.unit, t);
                log(t, "deviation regulator on unit " + std::to_string(e.unit));
                break;
            case EventKind::kEnableLimiter:
                dyn_.set_limiter(e.unit, e.limiter);
                log(t, "current limiter on unit " + std::to_string(e.unit));
                break;
            case EventKind::kShedLoad:
                shed(t, e.fraction);
                break;
        }
    }

    void log(Real t, std::string description) {
        res_.events.push_back({t, std::move(description)});
    }

    /// Steps a load-side ramp takes.
    [[nodiscard]] std::int64_t ramp_steps() const {
        return std::max<std::int64_t>(1, std::llround(opts_.load_ramp / dt_));
    }

    /// Remove `fraction` of the currently served base load (ramped).
    void shed(Real t, Real fraction) {
        const Real room = opts_.shed_cap - dyn_.scaling().shed;
        const Real delta = std::min(room, fraction * (1.0 - dyn_.scaling().shed));
        if (delta <= 0.0) return;
        Ramp r;
        const auto n = ramp_steps();
        r.dshed = delta / static_cast<Real>(n);
        r.left = n;
        ramps_.push_back(r);
        log(t, "shed " + std::to_string(fraction) + " of served load");
    }

    /// Apply one increment of every running load-side ramp.
    void advance_ramps() {
        for (auto& r : ramps_) {
            if (r.left <= 0) continue;
            --r.left;
            if (!r.load.empty()) dyn_.apply_load_step(r.load, r.dp, r.dq);
            if (r.dshed != 0.0)
                dyn_.scaling().shed = std::min(opts_.shed_cap, dyn_.scaling().shed + r.dshed);
        }
        std::erase_if(ramps_, [](const Ramp& r) { return r.left <= 0; });
    }

    /// Sample a frame and run the supervisory policies. Returns false when the
    /// run has to stop (collapse detected at this instant).
    [[nodiscard]] bool observe(Real t) {
        try {
            dyn_.derivatives(t, x_, k1_, scratch_, &report_);
        } catch (const NetworkSolveError& err) {
            collapse(t, std::string("network solve failed: ") + err.what());
            return false;
        }

        TraceFrame frame;
        frame.t = t;
        frame.f_sys = report_.f_sys;
        frame.shed = dyn_.scaling().shed;
        frame.units = report_.units;
        frame.v_mag = report_.v_net.cwiseAbs();
        res_.trace.frames.push_back(std::move(frame));

        if (!x_.allFinite()) {
            collapse(t, "state vector became non-finite");
            return false;
        }
        if (std::abs(report_.f_sys - 1.0) > opts_.collapse_df) {
            collapse(t, "system frequency left the recoverable band");
            return false;
        }
        if (report_.v_net.cwiseAbs().maxCoeff() > opts_.collapse_vmax) {
            collapse(t, "bus voltage left the recoverable band");
            return false;
        }

        if (opts_.trip_enabled) trip_policy(t);
        if (opts_.auto_shed) shed_policy(t);
        return true;
    }

    /// Open units that run sustained above the overload threshold while no
    /// power regulator is containing them.
    void trip_policy(Real t) {
        for (int k = 0; k < dyn_.n_units(); ++k) {
            const auto idx = static_cast<std::size_t>(k);
            const auto& ctl = dyn_.control(k);
            if (!ctl.active || ctl.power_reg) {
                overload_since_[idx] = -1;
                continue;
            }
            const bool over = report_.units[idx].s_m > opts_.trip_level * ctl.s_ref;
            if (!over) {
                overload_since_[idx] = -1;
                continue;
            }
            if (overload_since_[idx] < 0) overload_since_[idx] = t;
            if (t - overload_since_[idx] >= opts_.trip_window - 1e-12) {
                dyn_.set_active(k, false);
                overload_since_[idx] = -1;
                log(t, "unit " + std::to_string(k) + " tripped on sustained overload");
            }
        }
    }

    /// Execute pending shed requests, rate-limited so measurements can settle
    /// between actions.
    void shed_policy(Real t) {
        if (t - last_shed_t_ < opts_.shed_cooldown) return;
        Real requested = 0.0;
        for (int k = 0; k < dyn_.n_units(); ++k) {
            const auto& rep = report_.units[static_cast<std::size_t>(k)];
            if (rep.active && rep.action == TriggerAction::kShed)
                requested += opts_.shed_unit_fraction * dyn_.control(k).s_ref;
        }
        if (requested <= 0.0) return;
        const auto& scaling = dyn_.scaling();
        const Real served =
            std::abs(total_base_load(dyn_.model().network).p) * scaling.factor * (1.0 - scaling.shed);
        if (served <= 0.0) return;
        shed(t, std::min(Real(1), requested / served));
        last_shed_t_ = t;
    }

    /// One classic fourth-order step from t to t+dt. Returns false on a
    /// network failure (collapse).
    [[nodiscard]] bool advance(Real t) {
        try {
            dyn_.derivatives(t, x_, k1_, scratch_);
            xt_ = x_ + (0.5 * dt_) * k1_;
            dyn_.derivatives(t + 0.5 * dt_, xt_, k2_, scratch_);
            xt_ = x_ + (0.5 * dt_) * k2_;
            dyn_.derivatives(t + 0.5 * dt_, xt_, k3_, scratch_);
            xt_ = x_ + dt_ * k3_;
            dyn_.derivatives(t + dt_, xt_, k4_, scratch_);
        } catch (const NetworkSolveError& err) {
            collapse(t, std::string("network solve failed: ") + err.what());
            return false;
        }
        x_ += (dt_ / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
        return true;
    }

    struct Ramp {
        std::string load;  ///< empty for shed ramps
        Real dp = 0.0;
        Real dq = 0.0;
        Real dshed = 0.0;
        std::int64_t left = 0;
    };

    MicrogridDynamics& dyn_;
    TdsOptions opts_;
    Real dt_ = 0.0;
    std::int64_t n_steps_ = 0;
    std::int64_t stride_ = 1;
    std::vector<Ramp> ramps_;

    SimResult res_;
    Eigen::VectorXd x_, k1_, k2_, k3_, k4_, xt_;
    DynamicsScratch scratch_;
    EvalReport report_;
    Real last_shed_t_ = -1e30;
    Real collapse_t_ = 0.0;
    std::vector<Real> overload_since_;
};

}  // namespace detail

/// Integrate the model from x0 with the given event script. The dynamics
/// object is mutated by events and policies and holds the final configuration
/// when the call returns.
[[nodiscard]] inline SimResult simulate(MicrogridDynamics& dyn, const Eigen::VectorXd& x0,
                                        std::vector<Event> events, const TdsOptions& opts = {}) {
    detail::SimEngine engine(dyn, opts);
    return engine.run(x0, std::move(events));
}

}  // namespace mgsim
