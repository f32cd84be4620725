"""Success-verification prompt templates, one per task.

The wording is part of the external critic contract and must not drift:
conformance tests pin these strings byte-for-byte. Every template ends with
the same Yes/No instruction the reply parser relies on.
"""

YES_NO_SUFFIX = "Please respond with only 'Yes' or 'No'."

VERIFICATION_PROMPTS = {
    "door_opening": (
        "As the timesteps progress, does the robotic arm open the door AND is "
        "the robot arm grasping the handle in the LAST timestep?\n"
        "Please respond with only 'Yes' or 'No'."
    ),
    "drawer_opening": (
        "As the timesteps progress, does the robotic arm grasp the drawer "
        "handle and open it AND is the drawer open in the last timestep?\n"
        "Please respond with only 'Yes' or 'No'."
    ),
    "reorientation": (
        "As the timesteps progress, does the robotic arm/gripper reorient the "
        "object upright AND is the object upright in the LAST frame?\n"
        "Please respond with only 'Yes' or 'No'."
    ),
    "tissue_pickup": (
        "As the timesteps progress, does the robotic arm/gripper grasp the "
        "tissue AND is the gripper grasping the tissue in the LAST timestep?\n"
        "Please respond with only 'Yes' or 'No'."
    ),
    "bag_pickup": (
        "As the timesteps progress, does the robotic arm/gripper grasp the bag "
        "AND is the gripper grasping the bag in the LAST timestep?\n"
        "Please respond with only 'Yes' or 'No'."
    ),
}
