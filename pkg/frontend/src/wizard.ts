// Consent wizard view models. Pure functions from API payloads to what
// the screen shows; all transitions happen server-side via ApiClient.

import type { ConsentRecord, ConsentState, OemProfile } from "./types.js";

export type StepStatus = "done" | "current" | "pending" | "waiting";

export interface WizardStep {
  id: string;
  action: string | null; // consent action endpoint, when the driver acts
  title: string;
  description: string;
  status: StepStatus;
}

export const ODOMETER_REPORT_PERIOD_DAYS = 90;

// Driver-visible steps per flow variant, in completion order.
const SIMPLE_STEPS: Array<[string, string, string]> = [
  ["review", "Review and consent", "Check the data points that will be shared and give your consent."],
  ["confirm", "Confirm on the manufacturer portal", "Log in to your car maker's portal and approve the connection."],
];

const COMPLEX_STEPS: Array<[string, string, string]> = [
  ["review", "Review and consent", "Check the data points that will be shared and give your consent."],
  ["identity", "Verify your identity", "Confirm who you are on the dedicated identity website."],
  ["privacy", "Configure in-vehicle privacy settings", "Allow data transmission from inside the car."],
  ["transmission-test", "Run the transmission test", "Six minutes from engine start-up to shutdown, with an operator on the line."],
  ["odometer-report", "Report your mileage", "Send the odometer reading to start the connection; repeat every three months."],
];

// Which step a given workflow state is standing on.
const CURRENT_STEP_BY_STATE: Record<string, string> = {
  email_sent: "review",
  awaiting_oem_confirmation: "confirm",
  identity_verification: "identity",
  privacy_settings: "privacy",
  transmission_test: "transmission-test",
  background_processing: "odometer-report",
  awaiting_odometer_report: "odometer-report",
  expired: "odometer-report",
};

export function stepCatalog(variant: ConsentRecord["variant"]): Array<[string, string, string]> {
  return variant === "simple_portal" ? SIMPLE_STEPS : COMPLEX_STEPS;
}

export function wizardSteps(record: ConsentRecord): WizardStep[] {
  const catalog = stepCatalog(record.variant);
  const ids = catalog.map(([id]) => id);
  let currentIndex: number;
  if (record.state === "active" || record.state === "revoked") {
    currentIndex = ids.length; // beyond the last step
  } else {
    currentIndex = ids.indexOf(CURRENT_STEP_BY_STATE[record.state] ?? "review");
  }
  return catalog.map(([id, title, description], index) => {
    let status: StepStatus;
    if (index < currentIndex) status = "done";
    else if (index > currentIndex) status = "pending";
    else if (record.state === "background_processing") status = "waiting";
    else status = "current";
    return { id, action: id, title, description, status };
  });
}

export interface WizardNotice {
  tone: "info" | "warn" | "error";
  text: string;
}

export function wizardNotices(record: ConsentRecord, nowIso: string): WizardNotice[] {
  const notices: WizardNotice[] = [];
  if (record.state === "background_processing") {
    notices.push({
      tone: "info",
      text: "The manufacturer is running a background process over several days; the car must be driven in the meantime.",
    });
  }
  if (record.advisory) {
    notices.push({ tone: "warn", text: record.advisory });
  }
  if (record.support_flagged) {
    notices.push({ tone: "warn", text: "Identity verification failed repeatedly; our support team has been notified." });
  }
  if (record.state === "expired") {
    notices.push({ tone: "warn", text: "The connection lapsed: report the current mileage to resume it." });
  }
  if (record.state === "revoked") {
    notices.push({ tone: "error", text: "This consent has been revoked. Data collection for the vehicle has stopped." });
  }
  const countdown = odometerCountdownDays(record, nowIso);
  if (countdown !== null) {
    notices.push({
      tone: countdown <= 14 ? "warn" : "info",
      text: `Next odometer report due in ${countdown} day${countdown === 1 ? "" : "s"} (every three months).`,
    });
  }
  return notices;
}

/** Days until the quarterly odometer report falls due; null when the
 * consent is not an active complex-flow enrollment. */
export function odometerCountdownDays(record: ConsentRecord, nowIso: string): number | null {
  if (record.variant !== "stellantis_complex" || record.state !== "active") return null;
  if (!record.last_odometer_report_at) return null;
  const elapsedMs = Date.parse(nowIso) - Date.parse(record.last_odometer_report_at);
  const elapsedDays = Math.floor(elapsedMs / 86_400_000);
  return Math.max(0, ODOMETER_REPORT_PERIOD_DAYS - elapsedDays);
}

export const MECHANISM_INSTRUCTIONS: Record<string, string> = {
  double_push: "Press the assistance and SOS buttons at the same time to enable data transmission.",
  screen_v1: "On the center screen: Settings > Privacy > Data sharing (interface version 1).",
  screen_v2: "On the center screen: Vehicle > Privacy settings > Allow services (interface version 2).",
  screen_v3: "On the center screen: Menu > Connectivity > Data transmission (interface version 3).",
};

export interface ReviewSheet {
  brand: string;
  requestKinds: string[];
  notificationKinds: string[];
  monthlyCostEur: number;
}

/** What the driver reviews before consenting: the exact data points the
 * profile serves, straight from the platform's catalog. */
export function reviewSheet(profile: OemProfile): ReviewSheet {
  return {
    brand: profile.display_name,
    requestKinds: [...profile.request_kinds].sort(),
    notificationKinds: [...profile.notification_kinds].sort(),
    monthlyCostEur: profile.monthly_data_cost_eur,
  };
}

export type LinkEntryView =
  | { kind: "ok"; vin: string }
  | { kind: "expired"; message: string }
  | { kind: "invalid"; message: string };

export function linkEntryView(error: { status: number; code: string } | null, vin?: string): LinkEntryView {
  if (error === null) return { kind: "ok", vin: vin ?? "" };
  if (error.status === 410 || error.code === "LinkExpired") {
    return {
      kind: "expired",
      message: "This consent link is older than 72 hours. Ask your insurer to send a fresh one.",
    };
  }
  return { kind: "invalid", message: "This consent link is not valid. Check that the full link was copied." };
}

/** Whether the completed-consent screen shows the revoke control. */
export function showRevokeControl(record: ConsentRecord): boolean {
  return record.state === "active" || record.state === "expired";
}
