// JSON wire protocol mirror: envelope kinds, body shapes, dial table and
// the display formatter. The formatter must stay string-identical to the
// backend renderer; both sides are pinned by the shared golden vectors in
// test/display_golden.json.

export type MessageKind =
  | "JOIN"
  | "JOIN_ACK"
  | "LEAVE"
  | "CONTROL"
  | "CHAT"
  | "MEASUREMENT"
  | "PING"
  | "PONG"
  | "RELAY_CONTROL"
  | "RELAY_CHAT"
  | "RELAY_MEASUREMENT"
  | "ROSTER_UPDATE"
  | "ERROR";

export type ControlCode = "SET_DIAL" | "SET_POWER" | "SET_PROBE_NODE";
export type MeterMode = "DCV" | "OHM" | "DIODE";

export interface RosterEntry {
  id: number;
  name: string;
}

export interface RosterBody {
  members: RosterEntry[];
  dial: number;
  power: boolean;
  overload: boolean;
  last_value_micro: number;
}

export interface ControlBody {
  instrument: number;
  code: ControlCode;
  value: number;
}

export interface ChatBody {
  text: string;
}

export interface ReadingBody {
  mode: MeterMode;
  range: number;
  overload: boolean;
  value_micro: number;
}

export interface ErrorBody {
  code: string;
  detail: string;
}

export interface JoinBody {
  name: string;
}

export interface PingBody {
  nonce: number;
}

export type Body =
  | RosterBody
  | ControlBody
  | ChatBody
  | ReadingBody
  | ErrorBody
  | JoinBody
  | PingBody;

export interface Envelope {
  kind: MessageKind;
  origin: number;
  group: number;
  seq: number;
  body: Body;
}

const KINDS = new Set<string>([
  "JOIN", "JOIN_ACK", "LEAVE", "CONTROL", "CHAT", "MEASUREMENT", "PING",
  "PONG", "RELAY_CONTROL", "RELAY_CHAT", "RELAY_MEASUREMENT",
  "ROSTER_UPDATE", "ERROR",
]);

export function encodeEnvelope(env: Envelope): string {
  // Key order fixed (kind, origin, group, seq, body) for determinism.
  return JSON.stringify({
    kind: env.kind,
    origin: env.origin,
    group: env.group,
    seq: env.seq,
    body: env.body,
  });
}

export function decodeEnvelope(text: string): Envelope {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch {
    throw new Error("MALFORMED_TEXT");
  }
  if (typeof doc !== "object" || doc === null) {
    throw new Error("MALFORMED_TEXT");
  }
  const obj = doc as Record<string, unknown>;
  if (typeof obj.kind !== "string" || !KINDS.has(obj.kind)) {
    throw new Error("UNKNOWN_KIND");
  }
  for (const field of ["origin", "group", "seq"]) {
    if (typeof obj[field] !== "number") {
      throw new Error("INVALID_BODY");
    }
  }
  if (typeof obj.body !== "object" || obj.body === null) {
    throw new Error("INVALID_BODY");
  }
  return obj as unknown as Envelope;
}

// --- dial table ------------------------------------------------------------

export interface DialRange {
  ordinal: number;
  mode: MeterMode;
  label: string;
  unit: string;
  decimals: number;
  resolutionMicro: number;
  unitScaleMicro: number;
}

export const MAX_COUNTS = 1999;

export const DIAL_TABLE: DialRange[] = [
  { ordinal: 0, mode: "DCV", label: "200 mV", unit: "mV", decimals: 1, resolutionMicro: 100, unitScaleMicro: 1_000 },
  { ordinal: 1, mode: "DCV", label: "2 V", unit: "V", decimals: 3, resolutionMicro: 1_000, unitScaleMicro: 1_000_000 },
  { ordinal: 2, mode: "DCV", label: "20 V", unit: "V", decimals: 2, resolutionMicro: 10_000, unitScaleMicro: 1_000_000 },
  { ordinal: 3, mode: "DCV", label: "200 V", unit: "V", decimals: 1, resolutionMicro: 100_000, unitScaleMicro: 1_000_000 },
  { ordinal: 4, mode: "DCV", label: "1000 V", unit: "V", decimals: 1, resolutionMicro: 500_000, unitScaleMicro: 1_000_000 },
  { ordinal: 5, mode: "OHM", label: "200 Ω", unit: "Ω", decimals: 1, resolutionMicro: 100_000, unitScaleMicro: 1_000_000 },
  { ordinal: 6, mode: "OHM", label: "2 kΩ", unit: "kΩ", decimals: 3, resolutionMicro: 1_000_000, unitScaleMicro: 1_000_000_000 },
  { ordinal: 7, mode: "OHM", label: "20 kΩ", unit: "kΩ", decimals: 2, resolutionMicro: 10_000_000, unitScaleMicro: 1_000_000_000 },
  { ordinal: 8, mode: "OHM", label: "200 kΩ", unit: "kΩ", decimals: 1, resolutionMicro: 100_000_000, unitScaleMicro: 1_000_000_000 },
  { ordinal: 9, mode: "OHM", label: "2 MΩ", unit: "MΩ", decimals: 3, resolutionMicro: 1_000_000_000, unitScaleMicro: 1_000_000_000_000 },
  { ordinal: 10, mode: "OHM", label: "20 MΩ", unit: "MΩ", decimals: 2, resolutionMicro: 10_000_000_000, unitScaleMicro: 1_000_000_000_000 },
  { ordinal: 11, mode: "DIODE", label: "diode", unit: "V", decimals: 3, resolutionMicro: 1_000, unitScaleMicro: 1_000_000 },
];

// --- shared meter state and display ------------------------------------------

export interface MeterState {
  dial: number; // ordinal 0..11
  power: boolean;
  overload: boolean;
  valueMicro: number;
}

export const DEFAULT_STATE: MeterState = {
  dial: 2,
  power: true,
  overload: false,
  valueMicro: 0,
};

function roundHalfAway(x: number): number {
  return x >= 0 ? Math.floor(x + 0.5) : -Math.floor(-x + 0.5);
}

// Exact digits for countsMicro on a range; BigInt because MOhm values
// times 10^decimals overflow 2^53.
function formatMicro(valueMicro: number, range: DialRange): string {
  const scaled =
    (BigInt(valueMicro) * 10n ** BigInt(range.decimals)) /
    BigInt(range.unitScaleMicro);
  const negative = scaled < 0n;
  let digits = (negative ? -scaled : scaled).toString();
  if (digits.length < range.decimals + 1) {
    digits = digits.padStart(range.decimals + 1, "0");
  }
  const cut = digits.length - range.decimals;
  const sign = negative ? "-" : "";
  return `${sign}${digits.slice(0, cut)}.${digits.slice(cut)} ${range.unit}`;
}

export function renderDisplay(
  dial: number,
  valueMicro: number,
  overload: boolean,
  blank: boolean,
): string {
  if (blank) {
    return "";
  }
  if (overload) {
    return "OL";
  }
  return formatMicro(valueMicro, DIAL_TABLE[dial]);
}

// Same projection as the backend: power off blanks the panel, a stale
// value re-quantizes at the current range and may show OL.
export function stateDisplay(state: MeterState): string {
  if (!state.power) {
    return "";
  }
  if (state.overload) {
    return "OL";
  }
  const range = DIAL_TABLE[state.dial];
  const counts = roundHalfAway(state.valueMicro / range.resolutionMicro);
  if (Math.abs(counts) > MAX_COUNTS) {
    return "OL";
  }
  return renderDisplay(state.dial, counts * range.resolutionMicro, false, false);
}

export function applyControl(state: MeterState, body: ControlBody): MeterState {
  if (body.code === "SET_DIAL" && body.value >= 0 && body.value < 12) {
    return { ...state, dial: body.value };
  }
  if (body.code === "SET_POWER") {
    return { ...state, power: body.value !== 0 };
  }
  return state;
}

export function applyReading(state: MeterState, body: ReadingBody): MeterState {
  return {
    ...state,
    dial: body.range,
    overload: body.overload,
    valueMicro: body.value_micro,
  };
}

export function statesEqual(a: MeterState, b: MeterState): boolean {
  return (
    a.dial === b.dial &&
    a.power === b.power &&
    a.overload === b.overload &&
    a.valueMicro === b.valueMicro
  );
}
