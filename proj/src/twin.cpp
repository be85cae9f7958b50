#include "cardiotwin/twin.hpp"

#include "cardiotwin/error.hpp"

#include <algorithm>
#include <cmath>

namespace cardiotwin::twin {

namespace {

void check_params(const WindkesselParams& p) {
    if (!(p.resistance > 0.0)) fail(Errc::parameter, "resistance R must be positive");
    if (!(p.compliance > 0.0)) fail(Errc::parameter, "compliance C must be positive");
    if (!(p.stroke_volume > 0.0)) fail(Errc::parameter, "stroke volume SV must be positive");
}

void push_sample(std::vector<double>& trace, double value) {
    std::shift_left(trace.begin(), trace.end(), 1);
    trace.back() = value;
}

}  // namespace

TwinState make_twin(std::string patient_id, std::size_t resolution, WindkesselParams params,
                    double initial_pressure) {
    check_params(params);
    if (resolution == 0) fail(Errc::parameter, "trace length must be positive");
    TwinState s;
    s.patient_id = std::move(patient_id);
    s.params = params;
    s.pressure = initial_pressure;
    for (auto& t : s.traces) t.assign(resolution, 0.0);
    return s;
}

double windkessel_step(double pressure, double inflow, double resistance, double compliance, double dt_s) {
    if (!(compliance > 0.0)) fail(Errc::parameter, "compliance C must be positive");
    if (!(resistance > 0.0)) fail(Errc::parameter, "resistance R must be positive");
    return pressure + dt_s * (inflow / compliance - pressure / (resistance * compliance));
}

TwinState step_twin(const TwinState& state, const gateway::NormalizedFrame& frame, double dt_s) {
    check_params(state.params);
    if (!(dt_s > 0.0)) fail(Errc::parameter, "dt must be positive");
    if (frame.device_id != state.patient_id) {
        fail(Errc::reference, "frame from " + frame.device_id + " applied to twin of " + state.patient_id);
    }

    // A floored-sigma channel was scaled by 1/eps and carries no scale
    // information, so the twin holds that channel's last sample instead.
    const auto channel = [&](std::size_t trace, std::size_t c) {
        return frame.low_variance[c] ? state.traces[trace].back() : frame.values[c];
    };
    const double hr = channel(kTraceHeartRate, telemetry::kHeartRate);
    const double sbp = channel(kTraceSystolic, telemetry::kSystolic);

    const auto& p = state.params;
    const double inflow = hr / 60.0 * p.stroke_volume;
    const double tau = p.resistance * p.compliance;
    const auto substeps = static_cast<std::size_t>(std::max(1.0, std::ceil(dt_s / (0.5 * tau))));
    const double h = dt_s / static_cast<double>(substeps);

    double pressure = state.pressure;
    for (std::size_t i = 0; i < substeps; ++i) {
        pressure = windkessel_step(pressure, inflow, p.resistance, p.compliance, h);
    }
    if (!std::isfinite(pressure)) {
        fail(Errc::numeric, "non-finite pressure in twin of " + state.patient_id);
    }

    TwinState next = state;
    next.pressure = pressure;
    next.inflow = inflow;
    push_sample(next.traces[kTraceHeartRate], hr);
    push_sample(next.traces[kTraceSystolic], sbp);
    push_sample(next.traces[kTracePressure], pressure);
    push_sample(next.traces[kTraceInflow], inflow);
    next.last_t_ms = frame.t_ms;
    ++next.steps;
    return next;
}

FeatureImage rasterize(const TwinState& state) {
    const std::size_t r = state.resolution();
    FeatureImage img{Tensor(Shape{kTraceCount, r, r}), state.patient_id, state.last_t_ms};
    for (std::size_t c = 0; c < kTraceCount; ++c) {
        const auto& trace = state.traces[c];
        if (trace.size() != r) fail(Errc::shape, "trace buffers have unequal length");
        for (double v : trace) {
            if (!std::isfinite(v)) fail(Errc::numeric, "non-finite trace entry in twin of " + state.patient_id);
        }
        for (std::size_t y = 0; y < r; ++y) {
            std::copy(trace.begin(), trace.end(), img.tensor.data().begin() + static_cast<std::ptrdiff_t>((c * r + y) * r));
        }
    }
    return img;
}

nlohmann::ordered_json snapshot(const TwinState& state) {
    nlohmann::ordered_json j;
    j["patient_id"] = state.patient_id;
    j["t_ms"] = state.last_t_ms;
    j["steps"] = state.steps;
    j["pressure"] = state.pressure;
    j["inflow"] = state.inflow;
    j["params"] = {{"R", state.params.resistance}, {"C", state.params.compliance}, {"SV", state.params.stroke_volume}};
    j["traces"] = {{"hr", state.traces[kTraceHeartRate]},
                   {"sbp", state.traces[kTraceSystolic]},
                   {"pressure", state.traces[kTracePressure]},
                   {"inflow", state.traces[kTraceInflow]}};
    return j;
}

}  // namespace cardiotwin::twin
