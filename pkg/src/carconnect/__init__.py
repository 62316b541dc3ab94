"""Desk-scale connected-car data collection and usage-based-insurance analytics.

The package simulates the whole chain end to end: vehicle eligibility
screening, per-brand driver consent flows, OEM clouds behind a single
aggregator (OAuth, quotas, webhooks), twice-daily odometer polling and
notification-triggered collection, dual static/time-series persistence,
and the trip analytics an insurer derives from the collected telemetry.
"""

from .domain import (
    BadLength,
    CarConnectError,
    ConsentVariant,
    DataPointKind,
    ForbiddenCharacter,
    GpsPoint,
    NotificationEvent,
    NotificationKind,
    OemProfile,
    ProfileRegistry,
    RequestQuota,
    SampleSource,
    TelemetrySample,
    UnknownBrand,
    Vehicle,
    Vin,
    bmw_like_profile,
    mercedes_like_profile,
    parse_vin,
    stellantis_like_profile,
)
from .analytics import (
    BrakeEvent,
    CostVerdict,
    RiskFeatureVector,
    SpeedLimitMap,
    TheftReport,
    TripSummary,
    build_risk_features,
    compute_distance,
    compute_overspeed,
    cost_viability,
    detect_harsh_brakes,
    estimate_speeds,
    night_day_split,
    segment_trips,
    theft_report,
)
from .consent import ConsentRecord, ConsentService, ConsentState, PrivacyMechanism, RevokeSource
from .eligibility import (
    EligibilityOutcome,
    EligibilityService,
    RequirementRule,
    VinCheckState,
    VinEligibilityTable,
    requirement_check,
)
from .ingestion import CollectionPolicy, IngestionPlatform, Metrics, TokenManager, default_policy_for
from .scenario import Scenario, build_reference_scenario, derive_seed
from .simulator import (
    AccessTokenGrant,
    FaultPlan,
    OemCloudSimulator,
    SimVehicleConfig,
    generate_trace,
)
from .storage import FileSeriesStore, FileStaticStore, SeriesStore, StaticStore
from .timebase import EventEngine, SimClock
from .traces import SpeedProfile, TraceGenerator, Trip, TripModel, build_trip_from_legs

__version__ = "0.1.0"
