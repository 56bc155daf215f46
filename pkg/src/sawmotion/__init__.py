from .motion import MotionSequence, RobotState

__version__ = "0.1.0"
