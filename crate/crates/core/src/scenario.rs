//! placeholder
pub struct ControllerKind;
pub struct MetricsReport;
pub struct ScenarioConfig;
