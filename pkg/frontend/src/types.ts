// Shapes of the service's JSON payloads. The console renders these verbatim;
// it never synthesizes or mutates answer content client-side.

export type Stream = "MemoryBank" | "DeepRetrieval" | "Tool" | "Direct";

export interface BundleView {
  anchor: string;
  members: string[];
  score: number;
  text: string;
}

export interface EvidenceView {
  stream: Stream;
  subquery: string;
  provenance: string[];
  payload: {
    answer?: string;
    bundles?: BundleView[];
    question?: string;
    period?: string;
    tool?: string;
    [key: string]: unknown;
  };
  error: string | null;
}

export interface LedgerRecord {
  step: string;
  wall_s: number;
  model: string;
  prompt_tokens: number;
  completion_tokens: number;
}

export interface LedgerView {
  records: LedgerRecord[];
  total_tokens: number;
  total_wall_s: number;
  n: number;
  t: number;
}

export interface QueryResponse {
  answer: string;
  evidence: EvidenceView[];
  ledger_delta: LedgerView;
  ledger_total_tokens: number;
}

export interface HistoryTurn {
  role: "user" | "assistant";
  text: string;
  timestamp: number;
}

export interface SessionState {
  session_id: string;
  history: HistoryTurn[];
  ledger: LedgerView;
}

export interface CostEstimate {
  n: number;
  t: number;
  tokens: number;
  usd_per_k_queries: number;
  steps: Record<string, number>;
}

export interface ApiErrorBody {
  code: string;
  message: string;
}
