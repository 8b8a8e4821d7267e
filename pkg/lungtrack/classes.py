"""Pathology class taxonomy shared by every module."""

BACKGROUND = 0
HEALTHY_LUNG = 1
GROUND_GLASS = 2
CONSOLIDATION = 3
PLEURAL_EFFUSION = 4

#: Class index and display name for every voxel class. The order is part of the on-disk format.
CLASS_CHOICES = (
    (BACKGROUND, 'Background'),
    (HEALTHY_LUNG, 'Healthy lung'),
    (GROUND_GLASS, 'Ground-glass opacity'),
    (CONSOLIDATION, 'Consolidation'),
    (PLEURAL_EFFUSION, 'Pleural effusion'),
)

#: Short codes used in reports and tables.
CLASS_CODES = (
    (BACKGROUND, 'BG'),
    (HEALTHY_LUNG, 'HL'),
    (GROUND_GLASS, 'GGO'),
    (CONSOLIDATION, 'CONS'),
    (PLEURAL_EFFUSION, 'PLEFF'),
)

#: Classes that carry pathology information (everything except background).
FOREGROUND_CLASSES = (HEALTHY_LUNG, GROUND_GLASS, CONSOLIDATION, PLEURAL_EFFUSION)

N_CLASSES = len(CLASS_CHOICES)
