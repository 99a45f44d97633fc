import hashlib
import json
import os
import platform

import numpy as np
import pandas as pd
import scipy


def format_remaining(seconds):
    remainingSeconds = int(seconds)
    remainingDays = remainingSeconds // 86400
    remainingSeconds -= remainingDays * 86400
    remainingHours = remainingSeconds // 3600
    remainingSeconds -= remainingHours * 3600
    remainingMinutes = remainingSeconds // 60
    remainingSeconds -= remainingMinutes * 60
    if remainingDays > 0:
        return "%d:%d:%02d:%02d" % (
            remainingDays,
            remainingHours,
            remainingMinutes,
            remainingSeconds,
        )
    elif remainingHours > 0:
        return "%d:%02d:%02d" % (remainingHours, remainingMinutes, remainingSeconds)
    elif remainingMinutes > 0:
        return "%d:%02d" % (remainingMinutes, remainingSeconds)
    else:
        return "0:%02d" % remainingSeconds


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(config):
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def print_environment():
    print(" Numerical stack:")
    print("  Python      : " + platform.python_version())
    print("  NumPy       : " + np.__version__)
    print("  SciPy       : " + scipy.__version__)
    print("  pandas      : " + pd.__version__)
    print("  CPUs        : " + str(os.cpu_count()))
