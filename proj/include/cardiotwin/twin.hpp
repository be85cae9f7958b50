#pragma once

// Per-patient cardiovascular twin: a two-element Windkessel surrogate driven
// by normalized vitals, plus the rolling traces rendered into the classifier's
// input image.

#include "cardiotwin/gateway.hpp"
#include "cardiotwin/tensor.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cardiotwin::twin {

inline constexpr std::size_t kTraceCount = 4;

enum Trace : std::size_t {
    kTraceHeartRate = 0,  // normalized hr
    kTraceSystolic = 1,   // normalized sbp
    kTracePressure = 2,   // simulated arterial pressure P
    kTraceInflow = 3,     // simulated inflow Q
};

struct WindkesselParams {
    double resistance = 1.0;      // R
    double compliance = 1.0;      // C
    double stroke_volume = 60.0;  // SV; Q = hr/60 * SV, so resting Q equals normalized hr
};

struct TwinState {
    std::string patient_id;
    double pressure = 0.0;
    double inflow = 0.0;
    WindkesselParams params;
    std::array<std::vector<double>, kTraceCount> traces;  // each of length `resolution`, oldest first
    std::int64_t last_t_ms = -1;
    std::uint64_t steps = 0;

    std::size_t resolution() const noexcept { return traces[0].size(); }
};

TwinState make_twin(std::string patient_id, std::size_t resolution, WindkesselParams params = {},
                    double initial_pressure = 0.0);

// One explicit Euler step of dP/dt = Q/C - P/(R C).
double windkessel_step(double pressure, double inflow, double resistance, double compliance, double dt_s);

// Advances the twin by dt_s using the frame's normalized heart rate as the
// inflow driver. Intervals of 0.5 R C or more are split into equal Euler
// sub-steps. Traces shift by exactly one sample per call. A channel flagged
// low-variance repeats its previous trace sample (zero before warm-up).
// Errc::parameter for non-positive R/C/SV or dt; Errc::reference if the frame
// belongs to another patient; Errc::numeric if P turns non-finite (the input
// state is left untouched).
TwinState step_twin(const TwinState& state, const gateway::NormalizedFrame& frame, double dt_s);

struct FeatureImage {
    Tensor tensor;  // (k, r, r): every row of channel c is trace c
    std::string patient_id;
    std::int64_t t_ms = 0;
};

// Errc::numeric on non-finite trace entries.
FeatureImage rasterize(const TwinState& state);

nlohmann::ordered_json snapshot(const TwinState& state);

}  // namespace cardiotwin::twin
