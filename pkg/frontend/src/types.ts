// Wire-format types for the platform HTTP API (snake_case, RFC 3339 UTC).

export type Role = "driver" | "operator";

export interface Session {
  token: string;
  role: Role;
  subject: string;
  vin: string | null;
}

export interface OemProfile {
  brand: string;
  display_name: string;
  notification_kinds: string[];
  request_kinds: string[];
  request_quota: { max_requests: number; window_s: number; mode: string };
  consent_variant: "simple_portal" | "stellantis_complex";
  monthly_data_cost_eur: number;
  vin_check_method: string;
}

export interface Vehicle {
  vin: string;
  brand: string;
  model: string;
  production_year: number;
  purchase_country: string;
  fidelity_program_member: boolean;
}

export type ConsentState =
  | "initiated"
  | "email_sent"
  | "awaiting_oem_confirmation"
  | "identity_verification"
  | "privacy_settings"
  | "transmission_test"
  | "background_processing"
  | "awaiting_odometer_report"
  | "active"
  | "expired"
  | "revoked";

export interface ConsentRecord {
  vin: string;
  driver_email: string;
  variant: "simple_portal" | "stellantis_complex";
  state: ConsentState;
  created_at: string;
  state_changed_at: string;
  link_token: string | null;
  link_consumed: boolean;
  granted_at: string | null;
  access_token_ref: string | null;
  refresh_token_ref: string | null;
  last_odometer_report_at: string | null;
  last_reported_odometer_km: number | null;
  identity_retries: number;
  support_flagged: boolean;
  advisory: string | null;
  revoke_source: string | null;
}

export interface SeriesPoint {
  vin: string;
  kind: string;
  value: number | boolean | string | { lat: number; lon: number };
  observed_at: string;
  source: "request" | "notification";
}

export interface TripSummary {
  vin: string;
  start: string;
  end: string;
  distance_km: number;
  night_km: number;
  max_speed_kmh: number;
  mean_speed_kmh: number;
  harsh_brake_count: number;
  overspeed_km: number;
  point_count: number;
}

export interface TrackPoint {
  ts: string;
  lat: number;
  lon: number;
  speed_kmh: number;
  heading_deg: number;
}

export interface TripTrack {
  vin: string;
  index: number;
  points: TrackPoint[];
}

export interface RoadSegment {
  limit_kmh: number;
  road_class: "urban" | "rural" | "highway";
  points: { lat: number; lon: number }[];
}

export interface EligibilityOutcome {
  vin: string;
  requirement_ok: boolean;
  vin_check: "pending" | "eligible" | "not_eligible";
  checked_at: string;
  method: string | null;
}

export interface RiskFeatures {
  vin: string;
  period_start: string;
  period_end: string;
  total_km: number;
  night_fraction: number;
  urban_fraction: number;
  overspeed_fraction: number;
  harsh_brakes_per_100km: number;
  accident_flags: { accident: number; breakdown: number; emergency: number };
}
