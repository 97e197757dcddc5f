/** State of one AB comparison: playback, switch counting, timing, choice.
 *
 * The switch counter increments exactly when playback moves from one of the
 * two blinded stimuli to the other (reference listens in between do not
 * count). The timer starts on the first playback of any clip.
 */

import type { ClipGroup } from './audio.js';
import type { ClipKey, ComparisonPayload, SubmitRequest } from './types.js';

export type Clock = () => number;

export class ComparisonView {
  private switches = 0;
  private startedAtMs: number | null = null;
  private lastSide: 'a' | 'b' | null = null;

  constructor(
    readonly payload: ComparisonPayload,
    private readonly clips: ClipGroup,
    private readonly clock: Clock = () => Date.now(),
  ) {}

  get switchCount(): number {
    return this.switches;
  }

  elapsedSeconds(): number {
    if (this.startedAtMs === null) return 0;
    return (this.clock() - this.startedAtMs) / 1000;
  }

  play(key: ClipKey): void {
    if (this.startedAtMs === null) {
      this.startedAtMs = this.clock();
    }
    if (key === 'a' || key === 'b') {
      if (this.lastSide !== null && this.lastSide !== key) {
        this.switches += 1;
      }
      this.lastSide = key;
    }
    this.clips.play(key);
  }

  /** Lock in a choice; returns the submission for the service. */
  choose(choice: 'a' | 'b'): SubmitRequest {
    this.clips.stop();
    return {
      comparison_id: this.payload.comparison_id,
      choice,
      elapsed_seconds: this.elapsedSeconds(),
      switch_count: this.switches,
    };
  }
}
