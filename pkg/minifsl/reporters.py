import math
import time

from minifsl.errors import TrainingDiverged
from minifsl.util import format_remaining


class StdoutLogReporter:
    """Per-epoch training table on stdout."""

    def __init__(self, totalEpochs, reportInterval=1):
        self._reportInterval = reportInterval
        self._totalEpochs = totalEpochs
        self._inited = False

    def print_headers(self):
        print(
            "  %6s %11s %11s %11s %8s %8s %8s %11s"
            % ("Epoch", "L_ce", "L_hct", "L_rot", "Acc", "ValAcc", "Speed", "Completion")
        )
        print(
            "  %6s %11s %11s %11s %8s %8s %8s %11s"
            % ("", "", "", "", "%", "%", "ep/min", "dd:hh:mm:ss")
        )

    def _init(self):
        self._initialClockTime = time.time()
        self._inited = True

    def report(self, row):
        if not self._inited:
            self._init()
            self.print_headers()
        epoch = row["epoch"]
        done = epoch + 1

        if any(math.isnan(row[k]) for k in ("loss_ce", "loss_hct", "loss_rot")):
            raise TrainingDiverged(f"Training has become unstable at epoch {epoch}. Aborted")

        if done % self._reportInterval and done != self._totalEpochs:
            return

        elapsedSeconds = time.time() - self._initialClockTime
        speed = -1.0
        remaining = 0
        if elapsedSeconds > 0:
            speed = 60.0 * done / elapsedSeconds
            remaining = (self._totalEpochs - done) * elapsedSeconds / done

        print(
            "# %6d %11.5f %11.5f %11.5f %8.2f %8.2f %8.2f %11s"
            % (
                epoch,
                row["loss_ce"],
                row["loss_hct"],
                row["loss_rot"],
                100.0 * row["train_acc"],
                100.0 * row["val_acc"],
                speed,
                format_remaining(remaining),
            )
        )


class EvalLogReporter:
    """Running accuracy while episodes are evaluated."""

    def __init__(self, totalEpisodes, reportInterval=100):
        self._reportInterval = reportInterval
        self._totalEpisodes = totalEpisodes
        self._initialClockTime = None
        self._sum = 0.0

    def report(self, index, accuracy):
        if self._initialClockTime is None:
            self._initialClockTime = time.time()
            print("  %8s %9s %11s" % ("Episodes", "Mean acc", "Remaining"))
        self._sum += accuracy
        done = index + 1
        if done % self._reportInterval and done != self._totalEpisodes:
            return
        elapsed = time.time() - self._initialClockTime
        remaining = (self._totalEpisodes - done) * elapsed / done
        print(
            "# %8d %9.4f %11s"
            % (done, self._sum / done, format_remaining(remaining))
        )
